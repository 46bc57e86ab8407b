// SPDX-License-Identifier: Apache-2.0
#include "ilens/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

#include "ilens/csv.hpp"
#include "ilens/plot.hpp"

namespace ilens {

namespace fs = std::filesystem;

// ---- config parsing ------------------------------------------------------

namespace {

ImageShape parse_image(ObjectReader& r) {
  if (!r.has("image")) return {1, 16, 16};
  const auto dims = ObjectReader::convert<std::vector<std::size_t>>(r.raw("image"), r.field("image"));
  if (dims.size() != 3 || dims[0] == 0 || dims[1] == 0 || dims[2] == 0) {
    throw ConfigError(r.field("image") + ": expected [channels, height, width] with positive entries");
  }
  return {dims[0], dims[1], dims[2]};
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

DatasetSource parse_source(ObjectReader r, const fs::path& base) {
  DatasetSource d;
  d.classes = r.required<std::size_t>("classes");
  d.image = parse_image(r);
  if (r.has("idx")) {
    d.generated = false;
    auto i = r.object("idx");
    d.train_images = resolve(base, i.required<std::string>("train_images"));
    d.train_labels = resolve(base, i.required<std::string>("train_labels"));
    d.test_images = resolve(base, i.required<std::string>("test_images"));
    d.test_labels = resolve(base, i.required<std::string>("test_labels"));
    i.finish();
  } else {
    r.choice("generator", {"shapes"}, 0);
    d.class_offset = r.optional<std::size_t>("class_offset", 0);
    d.train_size = r.required<std::size_t>("train");
    d.test_size = r.required<std::size_t>("test");
    if (d.classes < 2 || d.class_offset + d.classes > kShapeKindCount) {
      throw ConfigError(r.field("classes") + ": shapes generator needs 2 <= classes and class_offset + classes <= " +
                        std::to_string(kShapeKindCount));
    }
    if (d.train_size < d.classes || d.test_size < d.classes) {
      throw ConfigError(r.where() + ": train and test sizes must be at least the class count");
    }
  }
  if (d.classes < 2) throw ConfigError(r.field("classes") + ": must be >= 2");
  r.finish();
  return d;
}

ModelConfig parse_model(const Json& j, const std::string& path, const DatasetSource& data) {
  for (const char* key : {"input", "num_classes", "head"}) {
    if (j.is_object() && j.contains(key)) {
      throw ConfigError(path + "." + key + ": set by the data and finetune sections, not the model");
    }
  }
  Json filled = j;
  if (!filled.is_object()) throw ConfigError(path + ": expected an object");
  filled["input"] = {data.image.channels, data.image.height, data.image.width};
  filled["num_classes"] = data.classes;
  return model_config_from_json(ObjectReader(filled, path));
}

InversionConfig parse_inversion(ObjectReader r) {
  InversionConfig c;
  c.iterations = r.optional("iterations", c.iterations);
  c.step_size = r.optional("step_size", c.step_size);
  c.init = static_cast<InversionInit>(r.choice("init", {"uniform_noise", "data_jitter"}, 0));
  c.jitter_sigma = r.optional("jitter_sigma", c.jitter_sigma);
  c.match_tolerance = r.optional("match_tolerance", c.match_tolerance);
  c.chunk_size = r.optional("chunk_size", c.chunk_size);
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(r.where() + ": " + e.what());
  }
  return c;
}

}  // namespace

RunConfig parse_run_config(const Json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  RunConfig c;
  c.source = j;
  ObjectReader r(j, "config");
  c.seed = r.required<std::uint64_t>("seed");
  c.output_dir = r.required<std::string>("output_dir");

  {
    auto d = r.object("data");
    c.pretrain_data = parse_source(d.object("pretrain"), base_dir);
    c.finetune_data = parse_source(d.object("finetune"), base_dir);
    if (!(c.pretrain_data.image == c.finetune_data.image)) {
      throw ConfigError(d.where() + ": pretrain and finetune images must share a shape");
    }
    c.corruption_kinds.assign(std::begin(kCorruptionKinds), std::end(kCorruptionKinds));
    c.severities = {1, 3, 5};
    if (d.has("corruptions")) {
      auto cr = d.object("corruptions");
      if (cr.has("kinds")) {
        c.corruption_kinds.clear();
        for (const auto& name : ObjectReader::convert<std::vector<std::string>>(cr.raw("kinds"), cr.field("kinds"))) {
          try {
            c.corruption_kinds.push_back(parse_corruption_kind(name));
          } catch (const ArgumentError& e) {
            throw ConfigError(cr.field("kinds") + ": " + e.what());
          }
        }
      }
      c.severities = cr.optional("severities", c.severities);
      for (int s : c.severities)
        if (s < 1 || s > 5) throw ConfigError(cr.field("severities") + ": severities must be in 1..5");
      c.n_per_cell = cr.optional("n_per_cell", c.n_per_cell);
      cr.finish();
    }
    if (c.corruption_kinds.empty() || c.severities.empty()) {
      throw ConfigError(d.field("corruptions") + ": needs at least one kind and one severity");
    }
    d.finish();
  }

  c.model = parse_model(r.raw("model"), r.field("model"), c.pretrain_data);

  c.pretrain = train_config_from_json(r.object("pretrain"));
  if (c.pretrain.loss != LossKind::cross_entropy) {
    throw ConfigError(r.field("pretrain") + ".loss: pretraining is classification (cross_entropy)");
  }

  {
    auto f = r.object("finetune");
    c.task = static_cast<FinetuneTask>(f.choice("task", {"classification", "reconstruction"}, 0));
    c.init = static_cast<FinetuneInit>(f.choice("init", {"pretrained", "scratch"}, 0));
    const Json& tj = f.raw("train");
    c.finetune = train_config_from_json(ObjectReader(tj, f.field("train")));
    const LossKind wanted =
        c.task == FinetuneTask::classification ? LossKind::cross_entropy : LossKind::l1_reconstruction;
    if (tj.contains("loss") && c.finetune.loss != wanted) {
      throw ConfigError(f.field("train") + ".loss: does not match finetune task");
    }
    c.finetune.loss = wanted;
    f.finish();
  }

  if (r.has("metrics")) {
    auto m = r.object("metrics");
    c.metrics.n = m.optional("n", c.metrics.n);
    c.metrics.k = m.optional("k", c.metrics.k);
    c.metrics_split = static_cast<Split>(m.choice("split", {"train", "test"}, 1));
    if (m.has("layers")) {
      for (int l : ObjectReader::convert<std::vector<int>>(m.raw("layers"), m.field("layers"))) {
        if (l < 1 || static_cast<std::size_t>(l) > c.model.layer_count()) {
          throw ConfigError(m.field("layers") + ": layer " + std::to_string(l) + " outside 1.." +
                            std::to_string(c.model.layer_count()));
        }
        c.metrics.layers.push_back(l - 1);
      }
    }
    if (m.has("inversion")) c.metrics.inversion = parse_inversion(m.object("inversion"));
    m.finish();
    try {
      c.metrics.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(m.where() + ": " + e.what());
    }
  }

  c.grid_modes = {GridMode::learning_forgetting, GridMode::cka};
  if (r.has("analysis")) {
    auto a = r.object("analysis");
    c.grid = a.optional("grid", c.grid);
    c.alpha = a.optional("alpha", c.alpha);
    if (!(c.alpha > 0 && c.alpha < 1)) throw ConfigError(a.field("alpha") + ": must be in (0, 1)");
    if (a.has("modes")) {
      c.grid_modes.clear();
      for (const auto& name : ObjectReader::convert<std::vector<std::string>>(a.raw("modes"), a.field("modes"))) {
        if (name == "learning_forgetting") {
          c.grid_modes.push_back(GridMode::learning_forgetting);
        } else if (name == "cka") {
          c.grid_modes.push_back(GridMode::cka);
        } else {
          throw ConfigError(a.field("modes") + ": unknown mode '" + name + "'");
        }
      }
    }
    a.finish();
  }
  r.finish();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError("config: malformed JSON in " + path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

std::string to_string(TrainStage s) {
  switch (s) {
    case TrainStage::pretrain: return "pretrain";
    case TrainStage::finetune: return "finetune";
    case TrainStage::scratch: return "scratch";
  }
  return "?";
}

// ---- pipeline ------------------------------------------------------------

namespace {

std::string split_name(Split s) { return s == Split::train ? "train" : "test"; }

void check_finite(const MetricProfile& p, const std::string& what) {
  for (const auto* v : {&p.forgetting, &p.learning, &p.cka_divergence}) {
    for (double x : *v)
      if (!std::isfinite(x)) throw NumericError("non-finite metric in " + what);
  }
}

std::string rel(const fs::path& p, const fs::path& base) { return fs::relative(p, base).generic_string(); }

}  // namespace

Pipeline::Pipeline(RunConfig cfg, PipelineOptions opts) : cfg_(std::move(cfg)), opts_(opts) {
  if (opts_.jobs < 1) throw ArgumentError("--jobs must be >= 1");
}

template <class F>
auto Pipeline::timed(const std::string& stage, F&& f) {
  log(stage + ": start");
  const auto t0 = std::chrono::steady_clock::now();
  auto finish = [&] {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timings_[stage] += s;
    std::ostringstream o;
    o.precision(3);
    o << std::fixed << stage << ": done in " << s << " s";
    log(o.str());
  };
  if constexpr (std::is_void_v<decltype(f())>) {
    f();
    finish();
  } else {
    auto r = f();
    finish();
    return r;
  }
}

void Pipeline::log(const std::string& line) const {
  if (opts_.log) *opts_.log << "[ilens] " << line << '\n' << std::flush;
}

ProtocolConfig Pipeline::protocol() const {
  ProtocolConfig p = cfg_.metrics;
  if (opts_.fast) {
    const auto f = ProtocolConfig::fast();
    p.n = f.n;
    p.k = f.k;
    p.inversion.iterations = f.inversion.iterations;
  }
  p.jobs = opts_.jobs;
  return p;
}

fs::path Pipeline::run_dir(const std::string& run) const { return dir() / "runs" / run; }

fs::path Pipeline::checkpoint(const std::string& run, std::size_t epoch) const {
  const auto p = run_dir(run) / "checkpoints" / checkpoint_name(epoch);
  if (!fs::exists(p / "manifest.json")) {
    throw IoError("missing checkpoint for run '" + run + "' epoch " + std::to_string(epoch) + " (" + p.string() +
                  ")");
  }
  return p;
}

std::size_t Pipeline::final_epoch(const std::string& run) const {
  const auto csv = run_dir(run) / "epochs.csv";
  if (!fs::exists(csv)) throw IoError("run '" + run + "' has no epochs.csv; train it first (" + csv.string() + ")");
  const auto records = read_epoch_csv(csv);
  if (records.empty()) throw FormatError(csv.string() + " has no epochs");
  return records.back().epoch;
}

Dataset Pipeline::load_dataset(const std::string& which, Split split) const {
  const auto d = dir() / "data" / which;
  const auto s = split_name(split);
  const auto img = d / (s + "-images.idx"), lab = d / (s + "-labels.idx");
  if (!fs::exists(img) || !fs::exists(lab)) {
    throw IoError("missing dataset " + which + "/" + s + " under " + d.string() + "; run gen-data first");
  }
  Dataset ds = load_idx(img, lab);
  const auto& src = which == "pretrain" ? cfg_.pretrain_data : cfg_.finetune_data;
  ds.num_classes = src.classes;
  ds.name = which;
  ds.split = split;
  ds.validate();
  return ds;
}

void Pipeline::gen_data() {
  timed("gen-data", [&] {
    const Rng root(cfg_.seed);
    for (const std::string which : {"pretrain", "finetune"}) {
      const auto& src = which == "pretrain" ? cfg_.pretrain_data : cfg_.finetune_data;
      const auto d = dir() / "data" / which;
      fs::create_directories(d);
      for (Split split : {Split::train, Split::test}) {
        Dataset ds;
        if (src.generated) {
          const auto rng = root.derive({Rng::hash("data"), Rng::hash(which), static_cast<std::uint64_t>(split)});
          ds = gen_shapes(split == Split::train ? src.train_size : src.test_size, src.classes, src.image, rng,
                          src.class_offset, split);
        } else {
          const bool tr = split == Split::train;
          ds = load_idx(tr ? src.train_images : src.test_images, tr ? src.train_labels : src.test_labels);
          if (!(ds.image_shape() == src.image)) {
            throw ConsistencyError("IDX images for " + which + " do not match the configured image shape");
          }
          ds.num_classes = src.classes;
          ds.validate();
        }
        ds.name = which;
        const auto s = split_name(split);
        write_idx(ds, d / (s + "-images.idx"), d / (s + "-labels.idx"));
        write_metadata(ds, d / ("metadata-" + s + ".json"));
        log("gen-data: " + which + "/" + s + " n=" + std::to_string(ds.size()));
      }
    }
  });
}

ModelConfig Pipeline::stage_model(TrainStage stage) const {
  ModelConfig m = cfg_.model;
  if (stage == TrainStage::pretrain) {
    m.num_classes = cfg_.pretrain_data.classes;
    m.head = HeadKind::classification;
  } else {
    m.num_classes = cfg_.finetune_data.classes;
    m.head = cfg_.task == FinetuneTask::classification ? HeadKind::classification : HeadKind::reconstruction;
  }
  m.validate();
  return m;
}

TrainConfig Pipeline::stage_train(TrainStage stage) const {
  TrainConfig t = stage == TrainStage::pretrain ? cfg_.pretrain : cfg_.finetune;
  // Folding the global seed in lets ILENS_SEED reseed every stage.
  t.seed = Rng(cfg_.seed).derive({Rng::hash("train"), Rng::hash(to_string(stage)), t.seed}).state().key;
  return t;
}

void Pipeline::train(TrainStage stage) {
  const std::string name = to_string(stage);
  timed("train." + name, [&] {
    const Rng root(cfg_.seed);
    const auto mc = stage_model(stage);
    const auto tc = stage_train(stage);
    const std::string data = stage == TrainStage::pretrain ? "pretrain" : "finetune";
    const auto tr = load_dataset(data, Split::train);
    const auto te = load_dataset(data, Split::test);

    Model<float> init;
    const bool from_pretrained = stage == TrainStage::finetune && cfg_.init == FinetuneInit::pretrained;
    if (from_pretrained) {
      const auto pre = load_checkpoint(checkpoint("pretrain", final_epoch("pretrain"))).model;
      init = rehead(pre, mc, root.derive("init.finetune.head"));
    } else {
      init = build_model<float>(mc, root.derive("init." + name));
    }

    const auto rd = run_dir(name);
    fs::remove_all(rd);
    TrainOptions o;
    o.checkpoint_dir = rd / "checkpoints";
    o.hook = [&](const EpochRecord& r, const Model<float>&) {
      std::ostringstream s;
      s << "train." << name << ": epoch " << r.epoch << " loss " << format_double(r.train_loss) << " test "
        << format_double(r.test_metric);
      log(s.str());
    };
    auto res = ilens::train(init, tr, te, tc, o);
    for (auto& r : res.records) r.checkpoint_path = "checkpoints/" + checkpoint_name(r.epoch);
    write_epoch_csv(res.records, rd / "epochs.csv");

    PlotSeries loss{"train loss", {}, {}}, metric{tc.loss == LossKind::cross_entropy ? "test accuracy" : "test L1",
                                                  {}, {}};
    for (const auto& r : res.records) {
      loss.x.push_back(static_cast<double>(r.epoch));
      loss.y.push_back(r.train_loss);
      metric.x.push_back(static_cast<double>(r.epoch));
      metric.y.push_back(r.test_metric);
    }
    write_text_atomic(rd / "curve.svg", line_plot_svg({"Training: " + name, "epoch", "value"}, {loss, metric}));
  });
}

MetricProfile Pipeline::metrics(const std::string& run) {
  return metrics(checkpoint(run, final_epoch(run)), checkpoint(run, 0), run);
}

MetricProfile Pipeline::metrics(const fs::path& ft_checkpoint, const fs::path& pt_checkpoint,
                                const std::string& name) {
  return timed("metrics." + name, [&] {
    const auto ft = load_checkpoint(ft_checkpoint).model;
    const auto pt = load_checkpoint(pt_checkpoint).model;
    const auto pool = load_dataset("finetune", cfg_.metrics_split);
    ProfileContext ctx;
    ctx.ft_checkpoint = ft_checkpoint.generic_string();
    ctx.pt_checkpoint = pt_checkpoint.generic_string();
    ctx.dataset = "finetune/" + split_name(cfg_.metrics_split);
    ctx.seed = cfg_.seed;
    const auto p = compute_profile(ft, pt, pool, protocol(), Rng(cfg_.seed).derive("metrics"), ctx);
    check_finite(p, "metrics for " + name);

    const auto md = dir() / "metrics" / name;
    write_profile_csv(p, md / "profile.csv");
    CsvTable detail({"layer", "stir_ft_given_pt", "stir_pt_given_ft", "pt_inversion_converged",
                     "ft_inversion_converged"});
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      detail.add_row({std::to_string(p.layers[l] + 1), format_double(p.stir_ft_given_pt[l]),
                      format_double(p.stir_pt_given_ft[l]), format_double(p.pt_convergence[l]),
                      format_double(p.ft_convergence[l])});
    }
    detail.write(md / "profile_detail.csv");
    std::vector<double> x;
    for (int l : p.layers) x.push_back(l + 1);
    write_text_atomic(md / "profile.svg",
                      line_plot_svg({"Layer-wise metrics: " + name, "layer", "value"},
                                    {{"forgetting", x, p.forgetting},
                                     {"learning", x, p.learning},
                                     {"cka divergence", x, p.cka_divergence}}));
    return p;
  });
}

FlowMatrix Pipeline::flow(const std::string& run) {
  return timed("flow." + run, [&] {
    const auto ft = load_checkpoint(checkpoint(run, final_epoch(run))).model;
    const auto pt = load_checkpoint(checkpoint(run, 0)).model;
    const auto pool = load_dataset("finetune", cfg_.metrics_split);
    const auto m = flow_matrix(ft, pt, pool, protocol(), Rng(cfg_.seed).derive("flow"));
    for (const auto& row : m.values)
      for (double v : row)
        if (!std::isfinite(v)) throw NumericError("non-finite invariance flow for " + run);
    const auto fd = dir() / "flow" / run;
    write_flow_csv(m, fd / "flow.csv");
    std::vector<std::string> rows, cols;
    for (int l : m.layers) {
      rows.push_back("pt " + std::to_string(l + 1));
      cols.push_back(std::to_string(l + 1));
    }
    write_text_atomic(fd / "flow.svg",
                      heatmap_svg({"Invariance flow: " + run, "finetuned layer j", "pretrained layer i"}, rows, cols,
                                  m.values));
    return m;
  });
}

DynamicsTrace Pipeline::dynamics(const std::string& run) {
  return timed("dynamics." + run, [&] {
    if (run != "scratch" && cfg_.task == FinetuneTask::reconstruction) {
      throw UnsupportedError("dynamics needs a classification finetune; '" + run + "' is reconstruction");
    }
    const std::size_t last = final_epoch(run);
    for (std::size_t e = 0; e <= last; ++e) checkpoint(run, e);
    const auto pt = load_checkpoint(checkpoint(run, 0)).model;
    const auto pool = load_dataset("finetune", cfg_.metrics_split);
    const auto test = load_dataset("finetune", Split::test);
    const auto cells = corruption_cells(cfg_.corruption_kinds, cfg_.severities);
    const auto suite =
        make_robustness_suite(test, cells, std::min(cfg_.n_per_cell, test.size()), Rng(cfg_.seed).derive("robustness"));
    auto proto = protocol();
    proto.layers.clear();

    DynamicsTrace t;
    t.cells = cells;
    for (std::size_t e = 0; e <= last; ++e) {
      const auto ft = load_checkpoint(checkpoint(run, e)).model;
      auto p = compute_profile(ft, pt, pool, proto, Rng(cfg_.seed).derive("metrics"));
      check_finite(p, "dynamics for " + run + " epoch " + std::to_string(e));
      const auto acc = evaluate_robustness(ft, suite);
      t.epochs.push_back(e);
      t.profiles.push_back(std::move(p));
      t.clean_acc.push_back(acc.clean);
      t.corrupted_acc.push_back(acc.corrupted);
      log("dynamics." + run + ": epoch " + std::to_string(e) + " clean " + format_double(acc.clean));
    }
    const auto dd = dir() / "dynamics" / run;
    write_trace(t, dd);

    const std::size_t L = t.layer_count();
    const std::size_t lo = L > 1 ? 1 : 0;
    PlotSeries f{"mean forgetting", {}, {}}, l{"mean learning", {}, {}},
        fs_{"std forgetting (layers " + std::to_string(lo + 1) + "-" + std::to_string(L) + ")", {}, {}};
    for (std::size_t e = 0; e < t.epochs.size(); ++e) {
      const double x = static_cast<double>(t.epochs[e]);
      f.x.push_back(x);
      l.x.push_back(x);
      fs_.x.push_back(x);
      f.y.push_back(aggregate(t.profiles[e].forgetting, 0, L - 1, AggregateOp::mean));
      l.y.push_back(aggregate(t.profiles[e].learning, 0, L - 1, AggregateOp::mean));
      fs_.y.push_back(aggregate(t.profiles[e].forgetting, lo, L - 1, AggregateOp::std));
    }
    write_text_atomic(dd / "metrics.svg",
                      line_plot_svg({"Learning and forgetting during training: " + run, "epoch", "value"},
                                    {f, l, fs_}));
    PlotSeries clean{"clean accuracy", f.x, t.clean_acc}, corr{"mean corrupted accuracy", f.x, t.mean_corrupted_acc()};
    write_text_atomic(dd / "accuracy.svg", line_plot_svg({"Accuracy: " + run, "epoch", "accuracy"}, {clean, corr}));
    return t;
  });
}

GridResult Pipeline::correlate(const std::string& run) {
  return timed("correlate." + run, [&] {
    const auto td = dir() / "dynamics" / run;
    if (!fs::exists(td / "accuracy.csv")) throw IoError("no dynamics trace for '" + run + "'; run dynamics first");
    const auto t = read_trace(td);
    const auto target = t.mean_corrupted_acc();
    const auto ad = dir() / "analysis" / run;
    GridResult primary;
    bool have_primary = false;
    if (cfg_.grid) {
      for (auto mode : cfg_.grid_modes) {
        auto g = hypothesis_grid(t, target, mode, cfg_.alpha, opts_.jobs);
        const std::string tag = mode == GridMode::cka ? "cka" : "learning_forgetting";
        write_grid_csv(g, ad / ("grid_" + tag + ".csv"));
        write_text_atomic(ad / ("grid_" + tag + ".json"), to_json(g).dump(2) + "\n");
        if (!have_primary || mode == GridMode::learning_forgetting) {
          primary = std::move(g);
          have_primary = true;
        }
      }
    }

    // Prefix correlations for std of forgetting over all but the first layer.
    const std::size_t L = t.layer_count();
    const HypothesisSpec spec{{SelectionKind::last_n, L - 1, 1, L - 1}, MetricOp::forgetting_only, AggregateOp::std};
    const auto series = hypothesis_series(t, spec);
    const auto pr = prefix_correlation(series, target);
    CsvTable csv({"epoch", "mean_corrupted_acc", "forgetting_std_last_n", "prefix_r"});
    PlotSeries line{spec.label(), {}, {}};
    for (std::size_t e = 0; e < t.epochs.size(); ++e) {
      csv.add_row({std::to_string(t.epochs[e]), format_double(target[e]), format_double(series[e]),
                   pr[e] ? format_double(*pr[e]) : ""});
      line.x.push_back(static_cast<double>(t.epochs[e]));
      line.y.push_back(pr[e] ? *pr[e] : std::nan(""));
    }
    csv.write(ad / "prefix.csv");
    write_text_atomic(ad / "prefix.svg", line_plot_svg({"Correlation with corrupted accuracy up to each epoch",
                                                        "epoch", "Pearson r"},
                                                       {line}));
    return primary;
  });
}

// ---- report --------------------------------------------------------------

namespace {

/// Minimal document model rendered to both Markdown and HTML.
struct Doc {
  struct Block {
    enum Kind { heading, para, table, image } kind;
    std::string text;
    std::vector<std::vector<std::string>> rows;  // table: first row is the header
    fs::path image_path;
  };
  std::vector<Block> blocks;

  void h(std::string t) { blocks.push_back({Block::heading, std::move(t), {}, {}}); }
  void p(std::string t) { blocks.push_back({Block::para, std::move(t), {}, {}}); }
  void table(std::vector<std::vector<std::string>> rows) { blocks.push_back({Block::table, {}, std::move(rows), {}}); }
  void img(std::string alt, fs::path path) { blocks.push_back({Block::image, std::move(alt), {}, std::move(path)}); }
};

std::string html_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

std::string render_md(const Doc& d, const fs::path& base) {
  std::ostringstream o;
  bool first = true;
  for (const auto& b : d.blocks) {
    if (!first) o << '\n';
    first = false;
    switch (b.kind) {
      case Doc::Block::heading: o << (b.text.starts_with("ilens") ? "# " : "## ") << b.text << '\n'; break;
      case Doc::Block::para: o << b.text << '\n'; break;
      case Doc::Block::image: o << "![" << b.text << "](" << rel(b.image_path, base) << ")\n"; break;
      case Doc::Block::table:
        for (std::size_t r = 0; r < b.rows.size(); ++r) {
          o << '|';
          for (const auto& c : b.rows[r]) o << ' ' << c << " |";
          o << '\n';
          if (r == 0) {
            o << '|';
            for (std::size_t c = 0; c < b.rows[0].size(); ++c) o << "---|";
            o << '\n';
          }
        }
        break;
    }
  }
  return o.str();
}

std::string render_html(const Doc& d) {
  std::ostringstream o;
  o << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>ilens run report</title>\n"
    << "<style>body{font-family:sans-serif;max-width:960px;margin:2em auto}table{border-collapse:collapse}"
    << "td,th{border:1px solid #ccc;padding:2px 6px;text-align:right}</style></head><body>\n";
  for (const auto& b : d.blocks) {
    switch (b.kind) {
      case Doc::Block::heading:
        o << (b.text.starts_with("ilens") ? "<h1>" : "<h2>") << html_escape(b.text)
          << (b.text.starts_with("ilens") ? "</h1>" : "</h2>") << '\n';
        break;
      case Doc::Block::para: o << "<p>" << html_escape(b.text) << "</p>\n"; break;
      case Doc::Block::image: o << "<figure>\n" << read_text(b.image_path) << "</figure>\n"; break;
      case Doc::Block::table:
        o << "<table>\n";
        for (std::size_t r = 0; r < b.rows.size(); ++r) {
          o << "<tr>";
          for (const auto& c : b.rows[r]) o << (r == 0 ? "<th>" : "<td>") << html_escape(c) << (r == 0 ? "</th>" : "</td>");
          o << "</tr>\n";
        }
        o << "</table>\n";
        break;
    }
  }
  o << "</body></html>\n";
  return o.str();
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p, std::size_t max_rows = 1000) {
  const auto t = CsvTable::read(p);
  std::vector<std::vector<std::string>> rows{t.header()};
  for (std::size_t i = 0; i < t.rows().size() && i < max_rows; ++i) rows.push_back(t.rows()[i]);
  return rows;
}

}  // namespace

void Pipeline::report() {
  timed("report", [&] {
    Doc d;
    d.h("ilens run report");
    d.p("Seed " + std::to_string(cfg_.seed) + ", tool version " + kToolVersion + ". Protocol: n=" +
        std::to_string(protocol().n) + ", k=" + std::to_string(protocol().k) + ", inversion iterations " +
        std::to_string(protocol().inversion.iterations) + ".");
    for (const std::string run : {"pretrain", "finetune", "scratch"}) {
      const auto rd = run_dir(run);
      if (!fs::exists(rd / "epochs.csv")) continue;
      d.h("Training: " + run);
      auto rows = csv_rows(rd / "epochs.csv");
      for (auto& r : rows) r.pop_back();  // drop checkpoint_path
      d.table(std::move(rows));
      if (fs::exists(rd / "curve.svg")) d.img("training curve " + run, rd / "curve.svg");
    }
    for (const std::string run : {"finetune", "scratch"}) {
      const auto md = dir() / "metrics" / run;
      if (fs::exists(md / "profile.csv")) {
        d.h("Layer-wise forgetting, learning and CKA divergence: " + run);
        d.table(csv_rows(md / "profile.csv"));
        if (fs::exists(md / "profile_detail.csv")) d.table(csv_rows(md / "profile_detail.csv"));
        d.img("metric profile " + run, md / "profile.svg");
      }
      const auto fd = dir() / "flow" / run;
      if (fs::exists(fd / "flow.csv")) {
        d.h("Invariance flow: " + run);
        d.p("Entry (i, j) is STIR(ft layer j | pt layer i) - STIR(ft layer i | pt layer i). Positive entries below "
            "the diagonal mark compression to earlier layers; above it, expansion to deeper layers.");
        d.table(csv_rows(fd / "flow.csv"));
        d.img("invariance flow " + run, fd / "flow.svg");
      }
      const auto dd = dir() / "dynamics" / run;
      if (fs::exists(dd / "accuracy.csv")) {
        d.h("Training dynamics: " + run);
        d.table(csv_rows(dd / "accuracy.csv"));
        d.img("metrics over epochs " + run, dd / "metrics.svg");
        d.img("accuracy over epochs " + run, dd / "accuracy.svg");
      }
      const auto ad = dir() / "analysis" / run;
      for (const std::string tag : {"learning_forgetting", "cka"}) {
        const auto jp = ad / ("grid_" + tag + ".json");
        if (!fs::exists(jp)) continue;
        const auto j = Json::parse(read_text(jp));
        d.h("Hypothesis grid (" + tag + "): " + run);
        d.p("Grid: " + j.at("grid_formula").get<std::string>() + ". Bonferroni threshold alpha/m = " +
            format_double(j.at("bonferroni_threshold").get<double>()) + ".");
        d.table(csv_rows(ad / ("grid_" + tag + ".csv"), 10));
      }
      if (fs::exists(ad / "prefix.csv")) {
        d.h("Prefix correlation: " + run);
        d.table(csv_rows(ad / "prefix.csv"));
        d.img("prefix correlation " + run, ad / "prefix.svg");
      }
    }
    write_text_atomic(dir() / "report.md", render_md(d, dir()));
    write_text_atomic(dir() / "report.html", render_html(d));
  });
}

// ---- manifest ------------------------------------------------------------

std::vector<ManifestFile> inventory(const fs::path& dir) {
  std::vector<ManifestFile> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto r = fs::relative(e.path(), dir).generic_string();
    if (r == "manifest.json" || r.ends_with(".tmp")) continue;
    out.push_back({r, e.file_size(), sha256_file(e.path())});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  return out;
}

void Pipeline::write_manifest() {
  const auto path = dir() / "manifest.json";
  Json stages = Json::object();
  if (fs::exists(path)) {
    try {
      const auto old = Json::parse(read_text(path));
      if (old.contains("stages") && old["stages"].is_object()) stages = old["stages"];
    } catch (const std::exception&) {
      // A damaged manifest only loses earlier timings.
    }
  }
  for (const auto& [name, s] : timings_) stages[name] = {{"seconds", s}};
  Json files = Json::array();
  for (const auto& f : inventory(dir())) files.push_back({{"path", f.path}, {"bytes", f.bytes}, {"sha256", f.sha256}});
  const Json hashed{{"config", cfg_.source}, {"seed", cfg_.seed}, {"fast", opts_.fast}};
  const Json m{{"format", "ilens-run-manifest-1"},
               {"tool_version", kToolVersion},
               {"config_hash", sha256_hex(hashed.dump())},
               {"seed", cfg_.seed},
               {"fast", opts_.fast},
               {"stages", stages},
               {"files", files}};
  write_text_atomic(path, m.dump(2) + "\n");
}

}  // namespace ilens
