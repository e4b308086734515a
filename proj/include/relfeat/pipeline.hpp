#pragma once

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "relfeat/eval.hpp"
#include "relfeat/io/idx.hpp"
#include "relfeat/io/png.hpp"

namespace relfeat {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

enum class DatasetKind { flower, mnist };

struct RunConfig {
  std::string command;
  fs::path data;           // flower variant dir (or its parent, with `variant`) or an MNIST IDX dir
  std::string variant = "single-6c";
  std::string profile = "mini";
  fs::path model;
  fs::path relevance;      // W file
  fs::path matrices;       // fit-set matrices
  fs::path test_matrices;  // held-out matrices
  fs::path image;          // explain: a PNG instead of a dataset sample
  fs::path out;
  std::vector<fs::path> inputs;  // report
  std::vector<fs::path> models;  // eval-iou over several folds
  std::vector<fs::path> relevances;
  std::vector<int> folds;
  double mu = 10.0;
  std::vector<double> mus{1.0, 5.0, 10.0, 20.0};
  std::size_t k = 3;
  std::uint64_t seed = 7;
  double threshold_step = 0.05;
  int fold = 0;
  int index = 0;
  int class_id = -1;  // interpret: -1 = every class
  std::size_t top_n = 100;
  std::string mode = "ours";  // a heatmap mode, or "all" for eval-iou
  int epochs = -1;            // negative = dataset default
  int batch_size = 0;
  double learning_rate = 0.0;
  double weight_decay = -1.0;
  std::size_t ablation_steps = 10;
  int random_seeds = 5;
  int occlusion_patch = 0;
  double occlusion_coverage = 0.30;
  bool occlusion_stochastic = false;
  std::size_t max_images = 0;  // 0 = whole held-out split
  std::size_t sanity_images = 20;
  unsigned threads = default_threads();
};

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{
      "gen-dataset",   "train",    "extract",        "select",      "explain",
      "interpret",     "eval-ablation", "eval-iou",  "eval-occlusion", "eval-sanity",
      "eval-reconstruction", "report"};
  return names;
}

inline void validate_config(const RunConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(std::find(command_names().begin(), command_names().end(), c.command) != command_names().end(),
       "unknown command '" + c.command + "'");
  need(c.mu > 0.0, "--mu must be > 0");
  for (double m : c.mus) need(m > 0.0, "every --mus value must be > 0");
  need(c.k >= 1, "--k must be >= 1");
  need(c.threshold_step > 0.0 && c.threshold_step < 0.5, "--threshold-step must lie in (0, 0.5)");
  need(c.fold >= 0 && c.fold < kFolds, "--fold must lie in [0, " + std::to_string(kFolds) + ")");
  for (int f : c.folds) need(f >= 0 && f < kFolds, "--folds values must lie in [0, " + std::to_string(kFolds) + ")");
  need(c.profile == "mini" || c.profile == "full", "--profile must be mini or full");
  parse_variant(c.variant);
  need(c.mode == "all" || c.mode == "ours" || c.mode == "deconv_gb_vanilla" || c.mode == "upsampled_activation",
       "--mode must be ours, deconv_gb_vanilla, upsampled_activation or all");
  need(c.mode != "all" || c.command == "eval-iou", "--mode all is only valid for eval-iou");
  need(c.epochs >= -1, "--epochs must be >= 0");
  need(c.batch_size >= 0, "--batch-size must be >= 1");
  need(c.learning_rate >= 0.0, "--lr must be > 0");
  need(c.top_n >= 1, "--top-n must be >= 1");
  need(c.ablation_steps >= 1, "--steps must be >= 1");
  need(c.random_seeds >= 1, "--random-seeds must be >= 1");
  need(c.occlusion_patch >= 0, "--patch must be >= 0");
  need(c.occlusion_coverage > 0.0 && c.occlusion_coverage <= 1.0, "--coverage must lie in (0, 1]");
  need(c.sanity_images >= 1, "--images must be >= 1");
  need(c.threads >= 1, "--threads must be >= 1");
  need(c.models.size() == c.relevances.size() && c.models.size() == c.folds.size(),
       "--models, --relevances and --folds must have equal lengths");
}

/// Output root: $RELFEAT_OUT when set, else ./relfeat_out.
inline fs::path default_output_root() {
  const char* env = std::getenv("RELFEAT_OUT");
  return env && *env ? fs::path(env) : fs::path("relfeat_out");
}

inline fs::path output_dir(const RunConfig& c) { return c.out.empty() ? default_output_root() / c.command : c.out; }

inline Json config_json(const RunConfig& c) {
  auto paths = [](const std::vector<fs::path>& v) {
    std::vector<std::string> s;
    for (const auto& p : v) s.push_back(p.generic_string());
    return s;
  };
  Json j;
  j["command"] = c.command;
  j["data"] = c.data.generic_string();
  j["variant"] = c.variant;
  j["profile"] = c.profile;
  j["model"] = c.model.generic_string();
  j["relevance"] = c.relevance.generic_string();
  j["matrices"] = c.matrices.generic_string();
  j["test_matrices"] = c.test_matrices.generic_string();
  j["image"] = c.image.generic_string();
  j["out"] = output_dir(c).generic_string();
  j["inputs"] = paths(c.inputs);
  j["models"] = paths(c.models);
  j["relevances"] = paths(c.relevances);
  j["folds"] = c.folds;
  j["mu"] = c.mu;
  j["mus"] = c.mus;
  j["k"] = c.k;
  j["seed"] = c.seed;
  j["threshold_step"] = c.threshold_step;
  j["fold"] = c.fold;
  j["index"] = c.index;
  j["class"] = c.class_id;
  j["top_n"] = c.top_n;
  j["mode"] = c.mode;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["weight_decay"] = c.weight_decay;
  j["ablation_steps"] = c.ablation_steps;
  j["random_seeds"] = c.random_seeds;
  j["occlusion_patch"] = c.occlusion_patch;
  j["occlusion_coverage"] = c.occlusion_coverage;
  j["occlusion_stochastic"] = c.occlusion_stochastic;
  j["max_images"] = c.max_images;
  j["sanity_images"] = c.sanity_images;
  j["threads"] = c.threads;
  return j;
}

inline Json seeds_json(std::uint64_t seed) {
  Json j;
  j["seed"] = seed;
  for (const char* s : {"init", "train", "random-ablation", "occlusion-random", "occlusion-sampling"})
    j[s] = derive_seed(seed, s);
  j["folds"] = "derive_seed(seed, \"folds\", class)";
  return j;
}

// ---- data ------------------------------------------------------------------------------------

struct LoadedData {
  DatasetKind kind = DatasetKind::flower;
  std::string dataset;  // "an8flower" or "mnist"
  std::string variant;  // flower variant, "digits" for MNIST
  LabeledDataset train;
  LabeledDataset test;
  LabeledDataset all;  // flower only: every sample, fold order preserved
};

inline fs::path flower_variant_dir(const RunConfig& c) {
  if (fs::exists(c.data / "manifest.json")) return c.data;
  if (fs::exists(c.data / c.variant / "manifest.json")) return c.data / c.variant;
  return {};
}

inline bool is_mnist_dir(const fs::path& p) { return fs::exists(p / "train-images-idx3-ubyte"); }

inline LoadedData load_data(const RunConfig& c, bool masks = false) {
  if (c.data.empty()) throw ConfigError(c.command + ": --data is required");
  LoadedData d;
  if (const auto dir = flower_variant_dir(c); !dir.empty()) {
    d.kind = DatasetKind::flower;
    d.dataset = "an8flower";
    d.all = load_flower_dataset(dir, masks);
    const auto m = nlohmann::json::parse(read_file(dir / "manifest.json"));
    d.variant = m.at("variant").get<std::string>();
    std::tie(d.train, d.test) = d.all.split_fold(c.fold);
    return d;
  }
  if (is_mnist_dir(c.data)) {
    d.kind = DatasetKind::mnist;
    d.dataset = "mnist";
    d.variant = "digits";
    d.train = io::load_idx(c.data / "train-images-idx3-ubyte", c.data / "train-labels-idx1-ubyte");
    d.test = io::load_idx(c.data / "t10k-images-idx3-ubyte", c.data / "t10k-labels-idx1-ubyte");
    return d;
  }
  throw DataError("no flower manifest or MNIST IDX files under " + c.data.string());
}

inline Hyperparams default_hyperparams(DatasetKind kind) {
  Hyperparams hp;
  if (kind == DatasetKind::flower) {
    hp.epochs = 20;
    hp.batch_size = 16;
    hp.learning_rate = 0.01;
    hp.weight_decay = 5e-4;
  } else {
    hp.epochs = 10;
    hp.batch_size = 32;
    hp.learning_rate = 0.01;
    hp.weight_decay = 0.0;
  }
  return hp;
}

inline Hyperparams resolve_hyperparams(const RunConfig& c, DatasetKind kind) {
  Hyperparams hp = default_hyperparams(kind);
  if (c.epochs >= 0) hp.epochs = c.epochs;
  if (c.batch_size > 0) hp.batch_size = c.batch_size;
  if (c.learning_rate > 0.0) hp.learning_rate = c.learning_rate;
  if (c.weight_decay >= 0.0) hp.weight_decay = c.weight_decay;
  hp.threads = c.threads;
  return hp;
}

inline Network load_checked_model(const RunConfig& c) {
  if (c.model.empty()) throw ConfigError(c.command + ": --model is required");
  return load_model(c.model);
}

inline RelevanceMatrix load_checked_relevance(const RunConfig& c, const DescriptorLayout& layout, int classes) {
  if (c.relevance.empty()) throw ConfigError(c.command + ": --relevance is required");
  auto W = load_relevance(c.relevance);
  if (W.m != layout.m || W.classes != static_cast<std::size_t>(classes))
    throw DataError("W file " + c.relevance.string() + " is " + std::to_string(W.m) + " x " + std::to_string(W.classes) +
                    ", model expects " + std::to_string(layout.m) + " x " + std::to_string(classes));
  return W;
}

inline LabeledDataset limit(const LabeledDataset& d, std::size_t n) {
  if (n == 0 || n >= d.size()) return d;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return d.subset(idx);
}

inline std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::vector<HeatmapMode> requested_modes(const RunConfig& c) {
  if (c.mode == "all") return {HeatmapMode::ours, HeatmapMode::deconv_gb_vanilla, HeatmapMode::upsampled_activation};
  return {parse_heatmap_mode(c.mode)};
}

// ---- commands ----------------------------------------------------------------------------------

inline Json cmd_gen_dataset(const RunConfig& c, const fs::path& out) {
  FlowerSpec spec;
  spec.variant = parse_variant(c.variant);
  if (c.profile == "mini") spec = mini_profile(spec);
  const auto d = generate_dataset(spec, out, c.seed, c.threads);
  const auto dir = out / std::string(to_string(spec.variant));
  Json r;
  r["dir"] = dir.generic_string();
  r["samples"] = d.size();
  r["classes"] = d.class_names;
  r["checksum"] = hex(tree_checksum(dir));
  return r;
}

inline Json cmd_train(const RunConfig& c, const fs::path& out) {
  const auto d = load_data(c);
  const Hyperparams hp = resolve_hyperparams(c, d.kind);
  const int classes = d.train.class_count();
  Network net = d.kind == DatasetKind::flower
                    ? make_flower_net(classes, derive_seed(c.seed, "init"), static_cast<int>(d.train.image_side()))
                    : make_mnist_net(derive_seed(c.seed, "init"), classes);
  TrainReport rep;
  net = train(std::move(net), d.train, hp, c.seed, &rep);
  save_model(net, out / "model.bin");
  std::ostringstream log;
  log << "epoch\tloss\ttrain_accuracy\n";
  for (std::size_t e = 0; e < rep.epochs.size(); ++e)
    log << e + 1 << '\t' << format_double(rep.epochs[e].mean_loss) << '\t'
        << format_double(rep.epochs[e].train_accuracy) << '\n';
  write_file(out / "train_log.tsv", log.str());
  Json r;
  r["model"] = (out / "model.bin").generic_string();
  r["dataset"] = d.dataset;
  r["variant"] = d.variant;
  r["epochs"] = hp.epochs;
  r["batch_size"] = hp.batch_size;
  r["learning_rate"] = hp.learning_rate;
  r["weight_decay"] = hp.weight_decay;
  r["train_samples"] = d.train.size();
  r["test_accuracy"] = accuracy(net, d.test, c.threads);
  return r;
}

inline Json cmd_extract(const RunConfig& c, const fs::path& out) {
  const Network net = load_checked_model(c);
  const auto d = load_data(c);
  const auto layout = make_layout(net);
  save_matrices(build_matrices(net, d.train, layout, c.threads), out / "train.txt");
  save_matrices(build_matrices(net, d.test, layout, c.threads), out / "test.txt");
  Json r;
  r["m"] = layout.m;
  r["train_samples"] = d.train.size();
  r["test_samples"] = d.test.size();
  r["train"] = (out / "train.txt").generic_string();
  r["test"] = (out / "test.txt").generic_string();
  return r;
}

inline Json cmd_select(const RunConfig& c, const fs::path& out) {
  if (c.matrices.empty()) throw ConfigError("select: --matrices is required");
  const auto mats = load_matrices(c.matrices);
  SpgOptions opt;
  opt.threads = c.threads;
  auto [W, rep] = solve_mu_lasso(mats, c.mu, opt);
  for (std::size_t j = 0; j < W.classes; ++j)
    if (!(W.l1(j) <= c.mu + 1e-8)) throw NumericError("select: column " + std::to_string(j) + " left the l1 ball");
  save_relevance(W, out / "W.txt");
  Json r;
  r["relevance"] = (out / "W.txt").generic_string();
  r["mu"] = c.mu;
  r["objective"] = rep.objective;
  std::vector<std::size_t> nnz;
  std::vector<double> l1;
  for (std::size_t j = 0; j < W.classes; ++j) nnz.push_back(W.nnz(j)), l1.push_back(W.l1(j));
  r["nnz"] = nnz;
  r["l1"] = l1;
  r["iterations"] = rep.iterations;
  r["support"] = W.support().size();
  return r;
}

inline Json cmd_explain(const RunConfig& c, const fs::path& out) {
  const Network net = load_checked_model(c);
  const auto layout = make_layout(net);
  const auto W = load_checked_relevance(c, layout, net.class_count);
  Tensor image;
  std::vector<std::string> names;
  if (!c.image.empty()) {
    image = io::from_raster(io::read_png(c.image));
  } else {
    const auto d = load_data(c);
    if (c.index < 0 || static_cast<std::size_t>(c.index) >= d.test.size())
      throw ConfigError("explain: --index " + std::to_string(c.index) + " outside the held-out split of " +
                        std::to_string(d.test.size()));
    image = d.test.images[static_cast<std::size_t>(c.index)];
    names = d.test.class_names;
  }
  ExplainOptions opt;
  opt.k = c.k;
  opt.mode = parse_heatmap_mode(c.mode);
  const auto e = explain_image(net, W, layout, image, opt);
  write_explanation(e, names, out);
  Heatmap combined;
  combined.values = combined_heatmap(e, image.shape().h, image.shape().w);
  write_heatmap(combined, out / "combined.png");
  Json r;
  r["predicted"] = e.predicted_class;
  r["confidence"] = e.confidence;
  r["truncated"] = e.truncated;
  std::vector<std::string> feats;
  for (const auto& f : e.features) feats.push_back(to_string(f.feature));
  r["features"] = feats;
  return r;
}

inline Json cmd_interpret(const RunConfig& c, const fs::path& out) {
  const Network net = load_checked_model(c);
  const auto layout = make_layout(net);
  const auto W = load_checked_relevance(c, layout, net.class_count);
  const auto d = load_data(c);
  std::vector<int> classes;
  if (c.class_id >= 0) {
    if (c.class_id >= net.class_count) throw ConfigError("interpret: --class outside [0, C)");
    classes.push_back(c.class_id);
  } else {
    for (int j = 0; j < net.class_count; ++j) classes.push_back(j);
  }
  InterpretOptions opt;
  opt.top_n = c.top_n;
  opt.threads = c.threads;
  std::ostringstream index;
  index << "class\trank\tfeature\timages\tshort_pool\tfile\n";
  Json r;
  for (int j : classes) {
    const auto name = d.train.class_names[static_cast<std::size_t>(j)];
    const auto vis = average_visualization(net, W, layout, j, d.train, opt);
    for (std::size_t rank = 0; rank < vis.size(); ++rank) {
      const auto& v = vis[rank];
      if (v.count == 0) continue;
      const std::string file = name + "/rank_" + std::to_string(rank + 1) + "_" + to_string(v.feature) + ".png";
      io::write_png(out / file, io::to_raster(v.mean_patch));
      index << j << '\t' << rank + 1 << '\t' << to_string(v.feature) << '\t' << v.count << '\t' << v.short_pool << '\t'
            << file << '\n';
    }
    r[name] = vis.size();
  }
  write_file(out / "index.tsv", index.str());
  return Json{{"features_per_class", r}};
}

inline Json cmd_eval_ablation(const RunConfig& c, const fs::path& out) {
  const Network net = load_checked_model(c);
  const auto layout = make_layout(net);
  const auto W = load_checked_relevance(c, layout, net.class_count);
  const auto d = load_data(c);
  const auto test = limit(d.test, c.max_images);
  const auto feats = relevance_order(W, layout);
  const auto conv = conv_features(net, feats);
  const auto pool = layout_features(layout);
  const auto sched = linear_schedule(feats.size(), c.ablation_steps);
  const auto conv_sched = linear_schedule(conv.size(), c.ablation_steps);
  std::vector<AblationCurve> curves{
      original_curve(net, test, sched, c.threads),
      ablation_curve(net, feats, test, sched, AblationCondition::all, c.threads),
      ablation_curve(net, conv, test, conv_sched, AblationCondition::only_conv, c.threads),
      random_ablation_curve(net, pool, test, sched, c.random_seeds, c.seed, c.threads)};
  const auto name = result_name(d.dataset, d.variant, "ablation", c.mu, c.k, c.seed);
  std::ostringstream s;
  write_ablation_tsv(s, curves);
  write_file(out / (name + ".tsv"), s.str());
  Json r;
  r["tsv"] = (out / (name + ".tsv")).generic_string();
  r["original"] = curves[0].accuracy.front();
  r["features"] = feats.size();
  r["conv_features"] = conv.size();
  r["all_drop"] = curves[0].accuracy.front() - curves[1].accuracy.back();
  r["only_conv_drop"] = curves[0].accuracy.front() - curves[2].accuracy.back();
  r["random_drop"] = curves[0].accuracy.front() - curves[3].accuracy.back();
  return r;
}

inline Json cmd_eval_iou(const RunConfig& c, const fs::path& out) {
  struct Job {
    fs::path model, relevance;
    int fold;
  };
  std::vector<Job> jobs;
  if (c.models.empty())
    jobs.push_back({c.model, c.relevance, c.fold});
  else
    for (std::size_t i = 0; i < c.models.size(); ++i) jobs.push_back({c.models[i], c.relevances[i], c.folds[i]});
  const auto modes = requested_modes(c);
  const auto taus = threshold_grid(c.threshold_step);
  std::vector<std::vector<IoUResult>> results(modes.size());
  std::string dataset, variant;
  for (const auto& job : jobs) {
    RunConfig fc = c;
    fc.model = job.model;
    fc.relevance = job.relevance;
    fc.fold = job.fold;
    const Network net = load_checked_model(fc);
    const auto layout = make_layout(net);
    const auto W = load_checked_relevance(fc, layout, net.class_count);
    const auto d = load_data(fc, true);
    if (d.kind != DatasetKind::flower) throw ConfigError("eval-iou: needs a flower dataset with masks");
    dataset = d.dataset;
    variant = d.variant;
    const auto test = limit(d.test, c.max_images);
    for (std::size_t m = 0; m < modes.size(); ++m)
      results[m].push_back(iou_auc(net, W, layout, test, modes[m], taus, c.k, c.threads, job.fold));
  }
  Json r;
  for (std::size_t m = 0; m < modes.size(); ++m) {
    const std::string mode(to_string(modes[m]));
    const auto name = result_name(dataset, variant, mode, c.mu, c.k, c.seed);
    std::ostringstream tsv, csv;
    write_iou_tsv(tsv, mode, results[m]);
    write_iou_curve_csv(csv, mode, results[m]);
    write_file(out / (name + ".tsv"), tsv.str());
    write_file(out / (name + "_curve.csv"), csv.str());
    std::vector<double> aucs;
    for (const auto& x : results[m]) aucs.push_back(x.auc);
    r[mode] = {{"auc", aucs}, {"mean", mean_of(aucs)}, {"std", stddev_of(aucs)}, {"tsv", (out / (name + ".tsv")).generic_string()}};
  }
  return r;
}

inline Json cmd_eval_occlusion(const RunConfig& c, const fs::path& out) {
  const Network net = load_checked_model(c);
  const auto layout = make_layout(net);
  const auto W = load_checked_relevance(c, layout, net.class_count);
  const auto d = load_data(c);
  const auto test = limit(d.test, c.max_images);
  OcclusionOptions opt;
  opt.patch = c.occlusion_patch;
  opt.max_coverage = c.occlusion_coverage;
  opt.stochastic = c.occlusion_stochastic;
  opt.seed = c.seed;
  const auto mode = parse_heatmap_mode(c.mode);
  std::vector<double> guided(test.size()), random(test.size());
  parallel_for(test.size(), c.threads, [&](std::size_t i) {
    const Tensor h = explanation_heatmap(net, W, layout, test.images[i], mode, c.k);
    guided[i] = occlusion_study(net, h, test.images[i], opt).final_drop();
    double sum = 0.0;
    for (int s = 0; s < c.random_seeds; ++s)
      sum += random_occlusion(net, test.images[i], derive_seed(c.seed, "occlusion", i * 1000 + static_cast<std::size_t>(s)), opt)
                 .final_drop();
    random[i] = sum / c.random_seeds;
  });
  const auto t = paired_t_test(guided, random);
  const auto name = result_name(d.dataset, d.variant, "occlusion", c.mu, c.k, c.seed);
  std::ostringstream s;
  s << "image\tguided_drop\trandom_drop\n";
  for (std::size_t i = 0; i < test.size(); ++i)
    s << i << '\t' << format_double(guided[i]) << '\t' << format_double(random[i]) << '\n';
  s << "mean\t" << format_double(mean_of(guided)) << '\t' << format_double(mean_of(random)) << '\n';
  s << "# paired t = " << format_double(t.t) << ", one-sided p = " << format_double(t.p_value) << ", n = " << t.n << '\n';
  write_file(out / (name + ".tsv"), s.str());
  Json r;
  r["tsv"] = (out / (name + ".tsv")).generic_string();
  r["guided_mean_drop"] = mean_of(guided);
  r["random_mean_drop"] = mean_of(random);
  r["t"] = t.t;
  r["p_value"] = t.p_value;
  r["images"] = test.size();
  return r;
}

/// Same-class partner for the sanity check: another crop of the same frame, angle and class
/// whose crop origin differs. Returns the index into `all`, or -1.
inline std::ptrdiff_t sanity_partner(const LabeledDataset& all, std::size_t i, int raw, int crop_side) {
  const auto& a = all.info[i];
  const auto origin = [&](const SampleInfo& s) { return crop_origin(raw, crop_side, s.substituted ? 4 : s.crop); };
  for (std::size_t b = 0; b < all.size(); ++b) {
    const auto& s = all.info[b];
    if (b == i || all.labels[b] != all.labels[i] || s.frame != a.frame || s.angle != a.angle) continue;
    if (origin(s) == origin(a)) continue;
    return static_cast<std::ptrdiff_t>(b);
  }
  return -1;
}

inline Json cmd_eval_sanity(const RunConfig& c, const fs::path& out) {
  const Network net = load_checked_model(c);
  const auto layout = make_layout(net);
  const auto W = load_checked_relevance(c, layout, net.class_count);
  const auto d = load_data(c);
  if (d.kind != DatasetKind::flower) throw ConfigError("eval-sanity: needs a flower dataset (crop pairs)");
  const auto manifest = nlohmann::json::parse(read_file(flower_variant_dir(c) / "manifest.json"));
  const int raw = manifest.at("raw_side").get<int>(), crop_side = manifest.at("crop_side").get<int>();
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < d.all.size() && pairs.size() < c.sanity_images; ++i) {
    if (d.all.folds[i] != c.fold) continue;
    const auto b = sanity_partner(d.all, i, raw, crop_side);
    if (b >= 0) pairs.push_back({i, static_cast<std::size_t>(b)});
  }
  if (pairs.empty()) throw DataError("eval-sanity: no crop pairs in fold " + std::to_string(c.fold));
  std::vector<double> same(pairs.size()), cross(pairs.size());
  parallel_for(pairs.size(), c.threads, [&](std::size_t p) {
    const auto [a, b] = pairs[p];
    const auto s = sanity_pair(net, W, layout, d.all.images[a], d.all.images[b],
                               crop_pair_offset(raw, crop_side, d.all.info[a], d.all.info[b]), c.k);
    same[p] = s.same_class;
    cross[p] = s.cross_class;
  });
  const auto t = paired_t_test(cross, same);
  const auto name = result_name(d.dataset, d.variant, "sanity", c.mu, c.k, c.seed);
  std::ostringstream s;
  s << "image\tpartner\tsame_class\tcross_class\n";
  for (std::size_t p = 0; p < pairs.size(); ++p)
    s << image_path(d.all, pairs[p].first) << '\t' << image_path(d.all, pairs[p].second) << '\t'
      << format_double(same[p]) << '\t' << format_double(cross[p]) << '\n';
  s << "mean\t\t" << format_double(mean_of(same)) << '\t' << format_double(mean_of(cross)) << '\n';
  write_file(out / (name + ".tsv"), s.str());
  Json r;
  r["tsv"] = (out / (name + ".tsv")).generic_string();
  r["pairs"] = pairs.size();
  r["same_class_mean"] = mean_of(same);
  r["cross_class_mean"] = mean_of(cross);
  r["t"] = t.t;
  r["p_value"] = t.p_value;
  return r;
}

inline Json cmd_eval_reconstruction(const RunConfig& c, const fs::path& out) {
  if (c.matrices.empty() || c.test_matrices.empty())
    throw ConfigError("eval-reconstruction: --matrices and --test-matrices are required");
  const auto fit = load_matrices(c.matrices);
  const auto held = load_matrices(c.test_matrices);
  SpgOptions opt;
  opt.threads = c.threads;
  std::ostringstream s;
  s << "mu\tmean_auc\tnnz\tskipped\n";
  Json r = Json::array();
  for (double mu : c.mus) {
    const auto W = solve_mu_lasso(fit, mu, opt).first;
    const auto rec = reconstruction_auc(held, W);
    std::size_t nnz = 0;
    for (std::size_t j = 0; j < W.classes; ++j) nnz += W.nnz(j);
    s << format_double(mu) << '\t' << format_double(rec.mean_auc) << '\t' << nnz << '\t' << rec.skipped.size() << '\n';
    r.push_back({{"mu", mu}, {"mean_auc", rec.mean_auc}, {"nnz", nnz}, {"skipped", rec.skipped}});
  }
  write_file(out / "reconstruction.tsv", s.str());
  return Json{{"tsv", (out / "reconstruction.tsv").generic_string()}, {"curve", r}};
}

// ---- report ------------------------------------------------------------------------------------

/// Published IoU-AUC reference values at mu = 10, for side-by-side display only.
inline std::optional<double> reference_auc(std::string_view variant, std::string_view mode) {
  static const std::map<std::pair<std::string, std::string>, double> ref{
      {{"single-6c", "ours"}, 22.5},
      {{"single-6c", "deconv_gb_vanilla"}, 21.3},
      {{"single-6c", "upsampled_activation"}, 16.8},
      {{"double-12c", "ours"}, 23.2},
      {{"double-12c", "deconv_gb_vanilla"}, 21.9},
      {{"double-12c", "upsampled_activation"}, 16.1}};
  const auto it = ref.find({std::string(variant), std::string(mode)});
  if (it == ref.end()) return std::nullopt;
  return it->second;
}

struct IouTable {
  // variant -> mode -> (fold -> auc)
  std::map<std::string, std::map<std::string, std::map<int, double>>> rows;
};

inline IouTable collect_iou_tsvs(const std::vector<fs::path>& inputs) {
  std::vector<fs::path> files;
  for (const auto& p : inputs) {
    if (fs::is_directory(p)) {
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file() && e.path().extension() == ".tsv") files.push_back(e.path());
    } else if (fs::exists(p)) {
      files.push_back(p);
    } else {
      throw DataError("report: no such input " + p.string());
    }
  }
  std::sort(files.begin(), files.end());
  IouTable t;
  for (const auto& f : files) {
    std::istringstream in(read_file(f));
    std::string line;
    if (!std::getline(in, line) || line.rfind("mode\tfold\tauc", 0) != 0) continue;
    const std::string stem = f.stem().string();
    const auto a = stem.find('_'), b = stem.find('_', a + 1);
    if (a == std::string::npos || b == std::string::npos) throw DataError("report: cannot parse run name " + stem);
    const std::string variant = stem.substr(a + 1, b - a - 1);
    while (std::getline(in, line)) {
      std::istringstream row(line);
      std::string mode, fold, auc;
      std::getline(row, mode, '\t');
      std::getline(row, fold, '\t');
      std::getline(row, auc, '\t');
      if (fold == "mean" || fold == "std" || fold.empty()) continue;
      try {
        t.rows[variant][mode][std::stoi(fold)] = std::stod(auc);
      } catch (const std::exception&) {
        throw DataError("report: malformed row in " + f.string() + ": " + line);
      }
    }
  }
  return t;
}

inline Json cmd_report(const RunConfig& c, const fs::path& out) {
  if (c.inputs.empty()) throw ConfigError("report: at least one --inputs path is required");
  const auto table = collect_iou_tsvs(c.inputs);
  if (table.rows.empty()) throw DataError("report: no IoU result TSVs found");
  static const std::vector<std::string> order{"ours", "deconv_gb_vanilla", "upsampled_activation"};
  std::ostringstream tsv, md;
  tsv << "variant\tmode\tfold\tauc\n";
  md << "# IoU-AUC summary\n\nValues are AUC of the mean-IoU curve in percent; +- is the standard deviation over folds.\n"
     << "Reference values are the published figures for a different model and renderer, shown for scale only.\n\n";
  Json r;
  for (const auto& [variant, modes] : table.rows) {
    std::set<int> folds;
    for (const auto& [m, v] : modes)
      for (const auto& [f, a] : v) folds.insert(f);
    md << "## " << variant << "\n\n| method |";
    for (int f : folds) md << " fold " << f << " |";
    md << " mean +- std | reference |\n|---|";
    for (std::size_t i = 0; i < folds.size(); ++i) md << "---|";
    md << "---|---|\n";
    std::vector<std::string> present;
    for (const auto& m : order)
      if (modes.count(m)) present.push_back(m);
    for (const auto& [m, v] : modes)
      if (std::find(order.begin(), order.end(), m) == order.end()) present.push_back(m);
    for (const auto& m : present) {
      const auto& v = modes.at(m);
      std::vector<double> aucs;
      md << "| " << m << " |";
      for (int f : folds) {
        if (v.count(f)) {
          md << ' ' << std::fixed << std::setprecision(2) << v.at(f) << " |";
          aucs.push_back(v.at(f));
          tsv << variant << '\t' << m << '\t' << f << '\t' << format_double(v.at(f)) << '\n';
        } else {
          md << " - |";
        }
      }
      const double mean = mean_of(aucs), sd = stddev_of(aucs);
      tsv << variant << '\t' << m << "\tmean\t" << format_double(mean) << '\n';
      tsv << variant << '\t' << m << "\tstd\t" << format_double(sd) << '\n';
      const auto ref = reference_auc(variant, m);
      md << ' ' << std::fixed << std::setprecision(2) << mean << " +- " << sd << " | "
         << std::setprecision(1);
      if (ref)
        md << *ref;
      else
        md << '-';
      md << " |\n";
      r[variant][m] = {{"mean", mean}, {"std", sd}, {"folds", aucs}};
    }
    if (modes.count("ours") && modes.count("deconv_gb_vanilla") && modes.count("upsampled_activation")) {
      int held = 0;
      for (int f : folds) {
        const auto get = [&](const std::string& m) { return modes.at(m).count(f) ? modes.at(m).at(f) : std::nan(""); };
        held += get("ours") > get("deconv_gb_vanilla") && get("deconv_gb_vanilla") > get("upsampled_activation");
      }
      md << "\nOrdering ours > deconv_gb_vanilla > upsampled_activation holds in " << held << " of " << folds.size()
         << " folds.\n";
      r[variant]["ordering_folds"] = held;
    }
    md << '\n';
  }
  write_file(out / "report.tsv", tsv.str());
  write_file(out / "report.md", md.str());
  return r;
}

// ---- dispatch ----------------------------------------------------------------------------------

/// Validates, runs one command, writes `<out>/run.json` and returns the results object.
inline Json run(const RunConfig& c) {
  validate_config(c);
  const fs::path out = output_dir(c);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw DataError("cannot create output directory " + out.string());
  Json results;
  if (c.command == "gen-dataset") results = cmd_gen_dataset(c, out);
  else if (c.command == "train") results = cmd_train(c, out);
  else if (c.command == "extract") results = cmd_extract(c, out);
  else if (c.command == "select") results = cmd_select(c, out);
  else if (c.command == "explain") results = cmd_explain(c, out);
  else if (c.command == "interpret") results = cmd_interpret(c, out);
  else if (c.command == "eval-ablation") results = cmd_eval_ablation(c, out);
  else if (c.command == "eval-iou") results = cmd_eval_iou(c, out);
  else if (c.command == "eval-occlusion") results = cmd_eval_occlusion(c, out);
  else if (c.command == "eval-sanity") results = cmd_eval_sanity(c, out);
  else if (c.command == "eval-reconstruction") results = cmd_eval_reconstruction(c, out);
  else if (c.command == "report") results = cmd_report(c, out);
  Json run;
  run["tool"] = "relfeat";
  run["config"] = config_json(c);
  run["seeds"] = seeds_json(c.seed);
  run["results"] = results;
  write_file(out / "run.json", run.dump(2) + "\n");
  return results;
}

/// Exit status for an exception escaping `run`: 2 config, 3 data, 4 numeric, 1 otherwise.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const std::invalid_argument*>(&e) ||
      dynamic_cast<const std::out_of_range*>(&e))
    return 2;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const nlohmann::json::exception*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 1;
}

}  // namespace relfeat
