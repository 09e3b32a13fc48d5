// Command-line front end: split / train / eval / map / saliency / selftest /
// synth, over the portable cube, label, palette and split file formats.
#include <CLI11.hpp>

#include <aspcnet/config.hpp>
#include <aspcnet/metrics.hpp>
#include <aspcnet/parallel.hpp>
#include <aspcnet/selftest.hpp>
#include <aspcnet/train.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace aspcnet;

namespace {

// Flag values collected per subcommand and applied over the config file.
struct FlagSet {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;

  RunConfig resolve() const {
    RunConfig rc;
    if (!config_path.empty()) rc.load_file(config_path);
    for (const auto& [k, v] : overrides) rc.set(k, v);
    return rc;
  }
};

void add_common_flags(CLI::App* cmd, FlagSet& flags) {
  cmd->add_option("--config", flags.config_path, "key=value configuration file");
  auto bind = [cmd, &flags](const std::string& flag, const std::string& key,
                            const std::string& help) {
    cmd->add_option_function<std::string>(
         flag, [&flags, key](const std::string& v) { flags.overrides.emplace_back(key, v); },
         help)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  };
  bind("--cube", "cube", "input cube file");
  bind("--labels", "labels", "label raster file");
  bind("--palette", "palette", "palette file");
  bind("--split", "split", "split file");
  bind("--checkpoint", "checkpoint", "checkpoint file");
  bind("--out", "out", "output file or directory");
  bind("--seed", "seed", "run seed");
  bind("--per-class", "per_class", "training pixels per class");
  bind("--fraction", "fraction", "training fraction per class");
  bind("--epochs", "epochs", "training epochs");
  bind("--batch", "batch", "batch size");
  bind("--lr", "lr", "Adam learning rate");
  bind("--dilation", "dilation", "ASP dilation rate");
  bind("--patch", "patch", "patch size (odd)");
  bind("--pca-dims", "pca_dims", "retained principal components");
  bind("--width-scale", "width_scale", "uniform width multiplier");
  bind("--precision", "precision", "f32 or f64");
  bind("--threads", "threads", "worker threads (ASPCNET_THREADS as fallback)");
  cmd->add_flag_function(
      "--deterministic",
      [&flags](std::int64_t) { flags.overrides.emplace_back("deterministic", "1"); },
      "suppress timestamps; reductions are fixed-order either way");
  cmd->add_flag_function(
      "--resume", [&flags](std::int64_t) { flags.overrides.emplace_back("resume", "1"); },
      "continue from <out>/last.ckpt");
  cmd->add_flag_function(
      "--all-pixels", [&flags](std::int64_t) { flags.overrides.emplace_back("all_pixels", "1"); },
      "map every pixel instead of labeled ones");
  cmd->add_flag_function(
      "--early-stop", [&flags](std::int64_t) { flags.overrides.emplace_back("early_stop", "1"); },
      "stop on a training-accuracy plateau");
}

void apply_threads(const RunConfig& rc) {
  long long threads = rc.get_int("threads", 0);
  if (threads <= 0) {
    if (const char* env = std::getenv("ASPCNET_THREADS")) threads = std::atoll(env);
  }
  if (threads <= 0) threads = 1;
  ThreadPool::instance().set_threads(static_cast<int>(threads));
}

std::string require(const RunConfig& rc, const std::string& key) {
  const std::string v = rc.get_string(key);
  if (v.empty()) throw std::invalid_argument("missing required option --" + key);
  return v;
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

int cmd_split(const RunConfig& rc) {
  LabelRaster labels = load_labels(require(rc, "labels"));
  SplitRequest req;
  req.seed = rc.get_u64("seed", 0);
  req.per_class = static_cast<int>(rc.get_int("per_class", 0));
  req.fraction = rc.get_double("fraction", 0.0);
  std::string warnings;
  SplitSpec split = stratified_split(labels, req, &warnings);
  if (!warnings.empty()) std::cerr << warnings;
  save_split(split, require(rc, "out"));
  std::cout << "wrote " << split.train.size() << " training pixels\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

template <typename S>
int run_train(const RunConfig& rc) {
  HsiCube cube = load_cube(require(rc, "cube"));
  LabelRaster labels = load_labels(require(rc, "labels"));
  SplitSpec split = load_split(require(rc, "split"));
  const std::string out_dir = require(rc, "out");
  fs::create_directories(out_dir);
  const bool deterministic = rc.get_bool("deterministic", false);
  const bool resume = rc.get_bool("resume", false);

  AspcNetConfig cfg = rc.net_config(labels.classes);
  PcaModel pca = fit_pca(cube, cfg.pca_dims);
  HsiCube reduced = apply_pca(pca, cube);

  AspcNet<S> net = build_network<S>(cfg);
  AdamOptimizer<S> opt;
  opt.lr = cfg.lr;
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.eps = cfg.adam_eps;

  FitOptions options;
  options.checkpoint_dir = out_dir;
  options.pca = &pca;
  options.early_stop = rc.get_bool("early_stop", false);
  options.patience = static_cast<int>(rc.get_int("patience", 10));
  const std::string log_path = out_dir + "/train_log.csv";
  if (resume) {
    std::map<std::string, std::string> stored;
    AdamOptimizer<S> restored;
    net = load_network<S>(out_dir + "/last.ckpt", &restored, &pca, &stored);
    net.cfg.epochs = cfg.epochs;  // epochs may be extended on resume
    opt = restored;               // keeps the moment estimates and step count
    opt.lr = cfg.lr;              // this run's hyperparameters win
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.eps = cfg.adam_eps;
    options.start_epoch = std::stoi(stored.at("epoch")) + 1;
  }
  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + log_path);
  if (!resume) log << "epoch,loss,train_oa,wall_seconds\n";

  char line[160];
  options.on_epoch = [&](const EpochStats& s) {
    std::snprintf(line, sizeof(line), "%d,%.8f,%.6f,%.3f", s.epoch, s.loss, s.train_oa,
                  deterministic ? 0.0 : s.seconds);
    log << line << "\n";
    log.flush();
    std::cout << "epoch " << s.epoch << " loss " << s.loss << " train-oa " << s.train_oa
              << "\n";
  };
  fit(net, opt, reduced, labels, split, options);
  std::cout << "checkpoints in " << out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

template <typename S>
int run_eval(const RunConfig& rc) {
  HsiCube cube = load_cube(require(rc, "cube"));
  LabelRaster labels = load_labels(require(rc, "labels"));
  SplitSpec split = load_split(require(rc, "split"));
  PcaModel pca;
  AspcNet<S> net = load_network<S>(require(rc, "checkpoint"), nullptr, &pca);
  if (net.cfg.classes != labels.classes)
    throw std::invalid_argument("checkpoint was trained for " +
                                std::to_string(net.cfg.classes) + " classes, labels have " +
                                std::to_string(labels.classes));
  HsiCube reduced = apply_pca(pca, cube);
  auto test = test_pixels(labels, split);
  auto preds = predict_pixels(net, reduced, test, net.cfg.batch);
  ConfusionMatrix cm(labels.classes);
  for (std::size_t i = 0; i < test.size(); ++i)
    cm.accumulate(labels.at(test[i].first, test[i].second) - 1, preds[i]);
  const std::string report = "test samples: " + std::to_string(cm.total()) + "\n" + cm.report();
  std::cout << report;
  const std::string out = rc.get_string("out");
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out);
    f << report;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// map
// ---------------------------------------------------------------------------

template <typename S>
int run_map(const RunConfig& rc) {
  HsiCube cube = load_cube(require(rc, "cube"));
  Palette palette = load_palette(require(rc, "palette"));
  PcaModel pca;
  AspcNet<S> net = load_network<S>(require(rc, "checkpoint"), nullptr, &pca);
  HsiCube reduced = apply_pca(pca, cube);
  const bool all_pixels = rc.get_bool("all_pixels", false);

  std::vector<std::pair<int, int>> pixels;
  if (all_pixels) {
    for (int y = 0; y < cube.height; ++y)
      for (int x = 0; x < cube.width; ++x) pixels.emplace_back(y, x);
  } else {
    LabelRaster labels = load_labels(require(rc, "labels"));
    check(labels.height == cube.height && labels.width == cube.width,
          "label extents do not match the cube");
    for (int y = 0; y < cube.height; ++y)
      for (int x = 0; x < cube.width; ++x)
        if (labels.at(y, x) > 0) pixels.emplace_back(y, x);
  }
  auto preds = predict_pixels(net, reduced, pixels, net.cfg.batch);
  std::vector<int> raster(static_cast<std::size_t>(cube.height) * cube.width, 0);
  for (std::size_t i = 0; i < pixels.size(); ++i)
    raster[static_cast<std::size_t>(pixels[i].first) * cube.width + pixels[i].second] =
        preds[i] + 1;
  export_map(raster, cube.height, cube.width, palette, require(rc, "out"));
  std::cout << "classified " << pixels.size() << " pixels\n";
  return 0;
}

// ---------------------------------------------------------------------------
// saliency
// ---------------------------------------------------------------------------

template <typename S>
int run_saliency(const RunConfig& rc, int row, int col, int class_1based) {
  HsiCube cube = load_cube(require(rc, "cube"));
  PcaModel pca;
  AspcNet<S> net = load_network<S>(require(rc, "checkpoint"), nullptr, &pca);
  check(row >= 0 && row < cube.height && col >= 0 && col < cube.width,
        "saliency: pixel out of bounds");
  check(class_1based >= 1 && class_1based <= net.cfg.classes, "saliency: class out of range");
  HsiCube reduced = apply_pca(pca, cube);
  Tensor<S> patch = extract_patch<S>(reduced, row, col, net.cfg.patch);
  Tensor<S> sal = saliency(net, patch, class_1based - 1);
  // Two-color ramp: 0 -> red (255,0,0), 1 -> blue (0,0,255).
  const int m = net.cfg.patch;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(m) * m * 3);
  for (std::size_t i = 0; i < sal.size(); ++i) {
    const double v = static_cast<double>(sal.data[i]);
    rgb[i * 3 + 0] = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - v)));
    rgb[i * 3 + 1] = 0;
    rgb[i * 3 + 2] = static_cast<std::uint8_t>(std::lround(255.0 * v));
  }
  write_ppm(m, m, rgb, require(rc, "out"));
  return 0;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

int cmd_synth(const RunConfig& rc, SyntheticSpec spec) {
  const std::string out_dir = require(rc, "out");
  fs::create_directories(out_dir);
  spec.seed = rc.get_u64("seed", 0);
  SyntheticData data = make_synthetic(spec);
  save_cube(data.cube, out_dir + "/cube.hsic");
  save_labels(data.labels, out_dir + "/labels.hsig");
  save_palette(data.palette, out_dir + "/palette.txt");
  std::cout << "wrote " << out_dir << "/{cube.hsic,labels.hsig,palette.txt}\n";
  return 0;
}

template <typename Fn32, typename Fn64>
int dispatch_precision(const RunConfig& rc, Fn32&& f32, Fn64&& f64) {
  const std::string precision = rc.get_string("precision", "f32");
  if (precision == "f32") return f32();
  if (precision == "f64") return f64();
  throw std::invalid_argument("precision must be f32 or f64, got '" + precision + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adaptive spatial pattern capsule network for hyperspectral classification"};
  app.require_subcommand(1);

  FlagSet split_flags, train_flags, eval_flags, map_flags, sal_flags, synth_flags;
  auto* split_cmd = app.add_subcommand("split", "write a stratified train/test split");
  add_common_flags(split_cmd, split_flags);
  auto* train_cmd = app.add_subcommand("train", "train a network");
  add_common_flags(train_cmd, train_flags);
  auto* eval_cmd = app.add_subcommand("eval", "per-class accuracy, OA, AA and Kappa");
  add_common_flags(eval_cmd, eval_flags);
  auto* map_cmd = app.add_subcommand("map", "export a PPM classification map");
  add_common_flags(map_cmd, map_flags);

  auto* sal_cmd = app.add_subcommand("saliency", "export an input-gradient heat map");
  add_common_flags(sal_cmd, sal_flags);
  int sal_row = -1, sal_col = -1, sal_class = -1;
  sal_cmd->add_option("--row", sal_row, "pixel row")->required();
  sal_cmd->add_option("--col", sal_col, "pixel column")->required();
  sal_cmd->add_option("--class", sal_class, "1-based class whose score is differentiated")
      ->required();

  auto* selftest_cmd = app.add_subcommand("selftest", "run the embedded invariant suite");

  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic labeled scene");
  add_common_flags(synth_cmd, synth_flags);
  SyntheticSpec synth_spec;
  synth_cmd->add_option("--size", synth_spec.size, "scene height and width");
  synth_cmd->add_option("--bands", synth_spec.bands, "spectral bands");
  synth_cmd->add_option("--classes", synth_spec.classes, "class count");
  synth_cmd->add_option("--block", synth_spec.block, "block width of the class regions");
  synth_cmd->add_option("--snr", synth_spec.snr_db, "signal-to-noise ratio in dB");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (split_cmd->parsed()) {
      RunConfig rc = split_flags.resolve();
      apply_threads(rc);
      return cmd_split(rc);
    }
    if (train_cmd->parsed()) {
      RunConfig rc = train_flags.resolve();
      apply_threads(rc);
      return dispatch_precision(rc, [&] { return run_train<float>(rc); },
                                [&] { return run_train<double>(rc); });
    }
    if (eval_cmd->parsed()) {
      RunConfig rc = eval_flags.resolve();
      apply_threads(rc);
      return dispatch_precision(rc, [&] { return run_eval<float>(rc); },
                                [&] { return run_eval<double>(rc); });
    }
    if (map_cmd->parsed()) {
      RunConfig rc = map_flags.resolve();
      apply_threads(rc);
      return dispatch_precision(rc, [&] { return run_map<float>(rc); },
                                [&] { return run_map<double>(rc); });
    }
    if (sal_cmd->parsed()) {
      RunConfig rc = sal_flags.resolve();
      apply_threads(rc);
      return dispatch_precision(
          rc, [&] { return run_saliency<float>(rc, sal_row, sal_col, sal_class); },
          [&] { return run_saliency<double>(rc, sal_row, sal_col, sal_class); });
    }
    if (selftest_cmd->parsed()) {
      FaultInjection fault;
      if (const char* env = std::getenv("ASPCNET_FAULT"))
        fault.squash_range = std::string(env) == "squash-range";
      const int failures = run_selftest(std::cout, fault);
      std::cout << (failures == 0 ? "selftest passed\n"
                                  : "selftest failed (" + std::to_string(failures) + ")\n");
      return failures == 0 ? 0 : 1;
    }
    if (synth_cmd->parsed()) {
      RunConfig rc = synth_flags.resolve();
      return cmd_synth(rc, synth_spec);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
