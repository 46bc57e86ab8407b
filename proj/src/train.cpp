// SPDX-License-Identifier: Apache-2.0
#include "ilens/train.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ilens/csv.hpp"

namespace ilens {

namespace {

constexpr const char* kCheckpointFormat = "ilens-checkpoint-1";

Tensor<float> compute_loss(const Model<float>& model, const Dataset& ds, std::span<const std::size_t> idx,
                           LossKind loss) {
  const auto x = ds.batch(idx);
  const auto out = model.forward(x);
  if (loss == LossKind::cross_entropy) {
    const auto labels = ds.batch_labels(idx);
    return cross_entropy(out, labels);
  }
  return l1(out, x);
}

void check_loss_matches_head(const ModelConfig& m, LossKind loss) {
  const bool recon = m.head == HeadKind::reconstruction;
  if (recon != (loss == LossKind::l1_reconstruction)) {
    throw ConfigError(recon ? "reconstruction head needs loss l1_reconstruction"
                            : "classification head needs loss cross_entropy");
  }
}

template <class E>
std::string_view enum_name(E v, std::initializer_list<std::string_view> names) {
  return *(names.begin() + static_cast<std::size_t>(v));
}

}  // namespace

double evaluate(const Model<float>& model, const Dataset& ds, std::size_t batch_size) {
  NoGradGuard guard;
  const bool recon = model.config().head == HeadKind::reconstruction;
  double total = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    idx.resize(std::min(batch_size, ds.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto x = ds.batch(idx);
    const auto out = model.forward(x);
    if (recon) {
      const auto a = out.data();
      const auto b = x.data();
      for (std::size_t i = 0; i < a.size(); ++i) total += std::abs(static_cast<double>(a[i]) - b[i]);
      continue;
    }
    const std::size_t C = out.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto row = out.data().subspan(r * C, C);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      total += best == ds.labels[idx[r]];
    }
  }
  if (recon) return total / static_cast<double>(ds.images.numel());
  return total / static_cast<double>(ds.size());
}

TrainResult train(const Model<float>& initial, const Dataset& train_ds, const Dataset& test_ds,
                  const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  // Copies of a Model share parameter storage; train a private deep copy.
  Model<float> model = initial.clone();
  check_loss_matches_head(initial.config(), cfg.loss);
  if (train_ds.size() == 0) throw ArgumentError("training set is empty");
  if (!(train_ds.image_shape() == model.config().input)) throw DimensionError("dataset images do not match model input");

  model.set_requires_grad(true);
  const std::size_t n = train_ds.size();
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.epochs * batches;
  Optimizer<float> opt(cfg, model.params());
  const Rng root(cfg.seed);

  if (opts.checkpoint_dir) save_checkpoint(model, *opts.checkpoint_dir / checkpoint_name(0), 0, root.state());

  TrainResult result;
  std::size_t t = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle = root.derive({Rng::hash("shuffle"), epoch});
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle.shuffle(order);
    double loss_sum = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t start = b * cfg.batch_size;
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, n - start));
      try {
        model.zero_grad();
        const auto loss = compute_loss(model, train_ds, idx, cfg.loss);
        backward(loss);
        loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
        opt.step(model.params(), t++, total);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                           ": " + e.what());
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.test_metric = evaluate(model, test_ds, opts.eval_batch_size);
    if (opts.checkpoint_dir) {
      const auto path = *opts.checkpoint_dir / checkpoint_name(epoch);
      save_checkpoint(model, path, epoch, shuffle.state());
      rec.checkpoint_path = path.string();
    }
    result.records.push_back(rec);
    if (opts.hook) opts.hook(rec, model.frozen());
  }
  model.zero_grad();
  result.model = std::move(model);
  return result;
}

std::string checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03zu", epoch);
  return buf;
}

void save_checkpoint(const Model<float>& model, const std::filesystem::path& dir, std::size_t epoch,
                     const Rng::State& rng_state) {
  std::filesystem::create_directories(dir);
  Json order = Json::array();
  std::string blob;
  blob.reserve(model.parameter_count() * 4);
  for (const auto& p : model.params()) {
    order.push_back({{"name", p.name}, {"shape", p.value.shape()}});
    for (float v : p.value.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int k = 0; k < 4; ++k) blob.push_back(static_cast<char>((bits >> (8 * k)) & 0xffu));
    }
  }
  const Json manifest = {{"format", kCheckpointFormat},
                         {"config", to_json(model.config())},
                         {"epoch", epoch},
                         {"rng_state", {{"key", rng_state.key}, {"counter", rng_state.counter}}},
                         {"param_order", order}};
  write_text_atomic(dir / "weights.bin", blob);
  write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("checkpoint directory not found: " + dir.string());
  Json manifest;
  try {
    manifest = Json::parse(read_text(dir / "manifest.json"));
  } catch (const Json::parse_error& e) {
    throw FormatError("unreadable checkpoint manifest in " + dir.string() + ": " + e.what());
  }
  ObjectReader r(manifest, "manifest");
  if (r.required<std::string>("format") != kCheckpointFormat) throw FormatError("unknown checkpoint format in " + dir.string());
  Checkpoint ck;
  const ModelConfig config = model_config_from_json(r.object("config"));
  ck.epoch = r.required<std::size_t>("epoch");
  {
    auto s = r.object("rng_state");
    ck.rng_state.key = s.required<std::uint64_t>("key");
    ck.rng_state.counter = s.required<std::uint64_t>("counter");
    s.finish();
  }
  // Names and shapes are a pure function of the config; check both.
  const auto reference = build_model<float>(config, Rng(0));
  const Json& order = r.raw("param_order");
  r.finish();
  if (!order.is_array() || order.size() != reference.params().size()) {
    throw ConsistencyError("checkpoint parameter list does not match its config in " + dir.string());
  }
  const std::string blob = read_text(dir / "weights.bin");
  if (blob.size() != reference.parameter_count() * 4) {
    throw ConsistencyError("weights.bin holds " + std::to_string(blob.size()) + " bytes, expected " +
                           std::to_string(reference.parameter_count() * 4));
  }
  std::vector<NamedParam<float>> params;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& ref = reference.params()[k];
    if (order[k].at("name").get<std::string>() != ref.name || order[k].at("shape").get<Shape>() != ref.value.shape()) {
      throw ConsistencyError("checkpoint parameter " + std::to_string(k) + " does not match " + ref.name);
    }
    std::vector<float> values(ref.value.numel());
    for (auto& v : values) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= std::uint32_t{static_cast<unsigned char>(blob[offset++])} << (8 * b);
      v = std::bit_cast<float>(bits);
    }
    params.push_back({ref.name, Tensor<float>(ref.value.shape(), std::move(values))});
  }
  ck.model = Model<float>(config, std::move(params));
  ck.model.set_requires_grad(true);
  return ck;
}

void write_epoch_csv(const std::vector<EpochRecord>& records, const std::filesystem::path& path) {
  CsvTable t({"epoch", "train_loss", "test_metric", "checkpoint_path"});
  for (const auto& r : records) {
    t.add_row({std::to_string(r.epoch), format_double(r.train_loss), format_double(r.test_metric), r.checkpoint_path});
  }
  t.write(path);
}

std::vector<EpochRecord> read_epoch_csv(const std::filesystem::path& path) {
  const auto t = CsvTable::read(path);
  const auto ce = t.column("epoch"), cl = t.column("train_loss"), cm = t.column("test_metric"),
             cp = t.column("checkpoint_path");
  std::vector<EpochRecord> out;
  for (const auto& row : t.rows()) {
    try {
      out.push_back({std::stoul(row[ce]), std::stod(row[cl]), std::stod(row[cm]), row[cp]});
    } catch (const std::exception&) {
      throw FormatError("malformed epoch row in " + path.string());
    }
  }
  return out;
}

Json to_json(const ModelConfig& c) {
  return {{"kind", enum_name(c.kind, {"mlp", "tiny_vit"})},
          {"input", {c.input.channels, c.input.height, c.input.width}},
          {"mlp_widths", c.mlp_widths},
          {"mlp_activation", enum_name(c.mlp_activation, {"relu", "identity"})},
          {"vit",
           {{"patch_size", c.vit.patch_size},
            {"embed_dim", c.vit.embed_dim},
            {"num_heads", c.vit.num_heads},
            {"depth", c.vit.depth},
            {"mlp_ratio", c.vit.mlp_ratio}}},
          {"num_classes", c.num_classes},
          {"head", enum_name(c.head, {"classification", "reconstruction"})},
          {"taps", enum_name(c.taps, {"flatten", "mean_tokens"})}};
}

ModelConfig model_config_from_json(ObjectReader r) {
  ModelConfig c;
  c.kind = static_cast<ModelKind>(r.choice("kind", {"mlp", "tiny_vit"}));
  if (r.has("input")) {
    const auto dims = ObjectReader::convert<std::vector<std::size_t>>(r.raw("input"), r.field("input"));
    if (dims.size() != 3) throw ConfigError(r.field("input") + ": expected [channels, height, width]");
    c.input = {dims[0], dims[1], dims[2]};
  }
  c.mlp_widths = r.optional("mlp_widths", c.mlp_widths);
  c.mlp_activation = static_cast<Activation>(r.choice("mlp_activation", {"relu", "identity"}, 0));
  if (r.has("vit")) {
    auto v = r.object("vit");
    c.vit.patch_size = v.optional("patch_size", c.vit.patch_size);
    c.vit.embed_dim = v.optional("embed_dim", c.vit.embed_dim);
    c.vit.num_heads = v.optional("num_heads", c.vit.num_heads);
    c.vit.depth = v.optional("depth", c.vit.depth);
    c.vit.mlp_ratio = v.optional("mlp_ratio", c.vit.mlp_ratio);
    v.finish();
  }
  c.num_classes = r.optional("num_classes", c.num_classes);
  c.head = static_cast<HeadKind>(r.choice("head", {"classification", "reconstruction"}, 0));
  c.taps = static_cast<TapAggregation>(r.choice("taps", {"flatten", "mean_tokens"}, 0));
  r.finish();
  try {
    c.validate();
  } catch (const UnsupportedError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(r.where() + ": " + e.what());
  }
  return c;
}

Json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"optimizer", enum_name(c.optimizer, {"sgd", "adam"})},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"schedule", enum_name(c.schedule, {"cosine", "constant"})},
          {"loss", enum_name(c.loss, {"cross_entropy", "l1_reconstruction"})},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(ObjectReader r) {
  TrainConfig c;
  c.epochs = r.optional("epochs", c.epochs);
  c.batch_size = r.optional("batch_size", c.batch_size);
  c.optimizer = static_cast<OptimizerKind>(r.choice("optimizer", {"sgd", "adam"}, 0));
  c.lr = r.optional("lr", c.lr);
  c.momentum = r.optional("momentum", c.momentum);
  c.weight_decay = r.optional("weight_decay", c.weight_decay);
  c.schedule = static_cast<ScheduleKind>(r.choice("schedule", {"cosine", "constant"}, 0));
  c.loss = static_cast<LossKind>(r.choice("loss", {"cross_entropy", "l1_reconstruction"}, 0));
  c.seed = r.optional<std::uint64_t>("seed", c.seed);
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(r.where() + ": " + e.what());
  }
  return c;
}

}  // namespace ilens
