// quadnet: simulate datasets, train and run the MAR networks, score them and
// the classical baselines, and inspect sinogram spectra.
//
// Every command writes into a run directory:
//   config.lock    merged configuration (sorted key = value)
//   manifest.txt   command, config hash, seed, version
//   checkpoints/ metrics/ images/ logs/ outputs/

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include "quadnet/config.hpp"
#include "quadnet/gradcheck_suite.hpp"
#include "quadnet/raster.hpp"
#include "quadnet/robustness.hpp"

#ifndef QUADNET_VERSION
#define QUADNET_VERSION "0.1.0-unknown"
#endif

namespace fs = std::filesystem;
using namespace quadnet;

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k = geometry_keys();
    for (const char* s :
         {"run.seed", "data.n", "data.noise", "data.dir", "model.kind", "model.mode", "model.width",
          "model.fourier_skips", "model.dir", "train.steps", "train.batch_size", "train.lr", "train.beta1",
          "train.beta2", "train.log_every", "train.augment_kernels", "baseline.method", "robustness.sweep",
          "robustness.kernels", "spectrum.input", "gradcheck.filter"}) {
      k.insert(s);
    }
    return k;
  }();
  return keys;
}

std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(what + ": cannot parse '" + item + "' as an integer");
    }
  }
  if (out.empty()) throw Error(what + ": empty list");
  return out;
}

// Options shared by every command. Flags are recorded as config overrides so
// that config.lock alone reproduces the run.
struct Common {
  std::string config_file, run_dir, geometry;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "override, key=value (repeatable)");
    app->add_option("--run", run_dir, "run directory for all outputs")->required();
  }
  void attach_geometry(CLI::App* app) {
    app->add_option("--geometry", geometry, "preset (desk, ablation, fullscale) or geometry config file");
  }
  // Registers a flag stored under `key` when given.
  template <class V>
  CLI::Option* flag(CLI::App* app, const std::string& name, const std::string& key, const std::string& help) {
    return app->add_option_function<V>(
        name, [this, key](const V& v) {
          std::ostringstream os;
          os << v;
          flags[key] = os.str();
        },
        help);
  }

  Config merged(const std::map<std::string, std::string>& defaults) const {
    Config c;
    for (const auto& [k, v] : defaults) c.set(k, v);
    if (!config_file.empty()) {
      const Config file = Config::load(config_file);
      for (const auto& [k, v] : file.entries()) c.set(k, v);
    }
    if (!geometry.empty()) {
      Config g;
      if (fs::is_regular_file(geometry)) {
        g = Config::load(geometry);
        g.require_known(geometry_keys());
        geometry_to_config(geometry_from_config(g), g);
      } else {
        geometry_to_config(FanBeamGeometry::preset(geometry), g);
      }
      for (const auto& [k, v] : g.entries()) c.set(k, v);
    }
    for (const auto& [k, v] : flags) c.set(k, v);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw Error("--set expects key=value, got '" + s + "'");
      c.set(s.substr(0, eq), s.substr(eq + 1));
    }
    c.require_known(known_keys());
    for (const char* k : {"data.dir", "model.dir", "spectrum.input"}) {
      if (c.has(k)) c.set(k, fs::absolute(c.get_string(k)).lexically_normal().string());
    }
    return c;
  }
};

struct Run {
  fs::path dir;
  Config cfg;
  std::ofstream log;

  Run(const std::string& command, const fs::path& d, Config c) : dir(d), cfg(std::move(c)) {
    for (const char* sub : {"checkpoints", "metrics", "images", "logs", "outputs"}) fs::create_directories(dir / sub);
    std::ofstream(dir / "config.lock") << cfg.serialize();
    std::ofstream man(dir / "manifest.txt");
    man << "command " << command << "\n"
        << "config_hash " << hex64(cfg.hash()) << "\n"
        << "seed " << cfg.get_or<std::uint64_t>("run.seed", 0) << "\n"
        << "version " << QUADNET_VERSION << "\n";
    if (!man) throw Error("cannot write manifest in " + dir.string());
    log.open(dir / "logs" / (command + ".log"));
  }

  void note(const std::string& line) {
    log << line << "\n";
    log.flush();
    std::cerr << line << "\n";
  }

  std::ofstream open(const fs::path& rel) const {
    std::ofstream f(dir / rel);
    if (!f) throw Error("cannot write " + (dir / rel).string());
    return f;
  }
};

// ---------------------------------------------------------------------------
// Datasets

// A dataset directory, or a simulate run whose data/ holds one.
fs::path dataset_root(const fs::path& p) {
  if (fs::exists(p / "manifest.txt") && fs::exists(p / "geometry.cfg")) return p;
  if (fs::exists(p / "data" / "manifest.txt")) return p / "data";
  throw Error("no dataset found at " + p.string());
}

struct Dataset {
  FanBeamGeometry geometry;
  std::vector<Sample> samples;
};

Dataset load_data(const Config& c) {
  const fs::path root = dataset_root(c.get_string("data.dir"));
  Config gc = Config::load(root / "geometry.cfg");
  gc.require_known(geometry_keys());
  Dataset d{geometry_from_config(gc), load_dataset(root)};
  if (d.samples.empty()) throw Error("dataset " + root.string() + " is empty");
  // An explicit geometry must agree with the one the data was simulated on.
  for (const auto& k : geometry_keys()) {
    if (c.has(k) && gc.has(k) && c.get<double>(k) != gc.get<double>(k)) {
      throw Error("geometry key " + k + " = " + c.get_string(k) + " does not match dataset value " + gc.get_string(k));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Models

struct Model {
  std::string kind;  // quadnet | sfr | sr
  std::unique_ptr<QuadNet<float>> quad;
  std::unique_ptr<SfrNet<float>> sfr;
  std::unique_ptr<SrNet<float>> sr;

  Collector<float> params() {
    if (quad) return collect_all(*quad);
    if (sfr) return collect_all(*sfr);
    return collect_all(*sr);
  }
};

Model build_model(const Config& c, const FanBeamGeometry& g) {
  Model m;
  m.kind = c.get_string("model.kind");
  const SinoMode mode = sino_mode(c.get_string("model.mode"));
  const int width = c.get<int>("model.width");
  const auto seed = c.get<std::uint64_t>("run.seed");
  if (width < 2) throw Error("model.width must be at least 2");
  if (m.kind == "quadnet") {
    m.quad = std::make_unique<QuadNet<float>>(g, mode, width, seed, c.get<int>("model.fourier_skips") != 0);
  } else if (m.kind == "sfr") {
    m.sfr = std::make_unique<SfrNet<float>>(mode, width, seed);
  } else if (m.kind == "sr") {
    m.sr = std::make_unique<SrNet<float>>(mode, width, seed);
  } else {
    throw Error("model.kind must be quadnet, sfr or sr, got '" + m.kind + "'");
  }
  return m;
}

const std::map<std::string, std::string> kModelDefaults = {
    {"model.kind", "quadnet"}, {"model.mode", "completion"}, {"model.width", "16"}, {"model.fourier_skips", "1"}};

// Rebuilds a trained model from its run directory.
Model load_trained(const fs::path& run_dir, const FanBeamGeometry& g) {
  Config c = Config::load(run_dir / "config.lock");
  Model m = build_model(c, g);
  auto p = m.params();
  load_checkpoint(run_dir / "checkpoints" / "final", p);
  return m;
}

// Restored image in HU for one sample, plus the restored sinogram.
struct Restored {
  TensorD s_r, x_hu;
};

template <class Net>
Restored restore_sino(Net& net, const TrainSet<float>& one) {
  const Tensor<float>& aux = net.mode == SinoMode::enhance_projection ? one.mask_proj : one.trace;
  TensorF s_r = sfr_forward(net, one.s_mc, one.trace, aux, BnMode::eval);
  TensorF x_s = replace_and_recon(s_r, one.s_mc, one.trace, one.geometry);
  return {plane(s_r, 0), hu_from_normalized(plane(x_s, 0))};
}

Restored restore(Model& m, const Sample& s, const FanBeamGeometry& g) {
  NoGradGuard ng;
  const TrainSet<float> one = to_train_set<float>({s}, g);
  if (m.quad) {
    auto o = m.quad->forward(batch_of(one, {0}), BnMode::eval);
    return {plane(o.s_r, 0), hu_from_normalized(plane(o.x_r, 0))};
  }
  if (m.sfr) return restore_sino(*m.sfr, one);
  return restore_sino(*m.sr, one);
}

void write_windows(const Run& run, const std::string& stem, const TensorD& hu) {
  for (const auto& w : standard_windows()) write_window_pgm(run.dir / "images" / (stem + "_" + w.name + ".pgm"), hu, w);
}

std::vector<MetricRow> rows_for(const Sample& s, const MetricReport& r) {
  std::vector<MetricRow> out;
  for (const auto& ws : r.per_window) out.push_back({s.index, s.metal_bin, ws});
  return out;
}

void write_metrics(Run& run, const std::vector<MetricRow>& rows, const Warnings& w) {
  auto f = run.open("metrics/metrics.csv");
  write_metric_rows(f, rows);
  auto b = run.open("metrics/bins.csv");
  write_bin_summary(b, rows, MetalLibrary::standard().num_bins());
  for (const auto& msg : w) run.note("warning: " + msg);
}

// ---------------------------------------------------------------------------
// Commands

int cmd_simulate(const Config& c, const fs::path& run_dir) {
  Run run("simulate", run_dir, c);
  const FanBeamGeometry g = geometry_from_config(c);
  const int n = c.get<int>("data.n");
  if (n < 1) throw Error("data.n must be positive");
  DatasetOptions opt;
  opt.noise = c.get<int>("data.noise") != 0;
  const auto samples = make_dataset(n, g, SpectrumModel::polychromatic(), MetalLibrary::standard(),
                                    c.get<std::uint64_t>("run.seed"), opt);
  const fs::path data = run.dir / "data";
  fs::remove_all(data);
  save_dataset(data, samples);
  Config gc;
  geometry_to_config(g, gc);
  std::ofstream(data / "geometry.cfg") << gc.serialize();
  for (const auto& s : samples) {
    write_windows(run, sample_dir_name(s.index) + "_gt", hu_of_mu(s.x_gt));
    write_windows(run, sample_dir_name(s.index) + "_mc", hu_of_mu(baseline_reconstruction(s, g, Baseline::none)));
  }
  run.note("simulated " + std::to_string(n) + " samples into " + data.string());
  return 0;
}

int cmd_train(const Config& c, const fs::path& run_dir) {
  Run run("train", run_dir, c);
  Dataset d = load_data(c);
  if (c.has("train.augment_kernels")) {
    d.samples = augment_with_dilation(d.samples, d.geometry, parse_int_list(c.get_string("train.augment_kernels"), "train.augment_kernels"),
                                      c.get<std::uint64_t>("run.seed"));
  }
  const TrainSet<float> data = to_train_set<float>(d.samples, d.geometry);
  Model m = build_model(c, d.geometry);
  TrainOptions opt;
  opt.steps = c.get<int>("train.steps");
  opt.batch_size = c.get<int>("train.batch_size");
  opt.lr = c.get<double>("train.lr");
  opt.beta1 = c.get<double>("train.beta1");
  opt.beta2 = c.get<double>("train.beta2");
  opt.log_every = c.get<int>("train.log_every");
  opt.seed = c.get<std::uint64_t>("run.seed");
  if (opt.steps < 1 || opt.batch_size < 1) throw Error("train.steps and train.batch_size must be positive");

  CheckpointMeta meta;
  meta.values["model.kind"] = m.kind;
  auto losses = run.open("metrics/train_loss.csv");
  losses << "step,loss\n";
  opt.on_log = [&](int step, double loss) {
    losses << step << "," << loss << "\n";
    losses.flush();
    run.note("step " + std::to_string(step) + " loss " + std::to_string(loss));
    auto p = m.params();
    meta.values["step"] = std::to_string(step);
    save_checkpoint<float>(run.dir / "checkpoints" / "latest", p, nullptr, meta);
  };
  TrainHistory h;
  if (m.quad) h = train_quadnet(*m.quad, data, opt);
  else if (m.sfr) h = train_sfr(*m.sfr, data, opt);
  else h = train_sfr(*m.sr, data, opt);
  auto p = m.params();
  save_checkpoint<float>(run.dir / "checkpoints" / "final", p, nullptr, meta);
  run.note("trained " + std::to_string(opt.steps) + " steps in " + std::to_string(h.seconds) + " s");
  return 0;
}

int cmd_infer(const Config& c, const fs::path& run_dir) {
  Run run("infer", run_dir, c);
  const Dataset d = load_data(c);
  Model m = load_trained(c.get_string("model.dir"), d.geometry);
  for (const auto& s : d.samples) {
    const Restored r = restore(m, s, d.geometry);
    const fs::path out = run.dir / "outputs" / sample_dir_name(s.index);
    fs::create_directories(out);
    save_qnt(out / "s_r.qnt", r.s_r);
    save_qnt(out / "x_hu.qnt", r.x_hu);
    write_windows(run, sample_dir_name(s.index), r.x_hu);
  }
  run.note("restored " + std::to_string(d.samples.size()) + " samples");
  return 0;
}

int cmd_eval(const Config& c, const fs::path& run_dir) {
  Run run("eval", run_dir, c);
  const Dataset d = load_data(c);
  Model m = load_trained(c.get_string("model.dir"), d.geometry);
  std::vector<MetricRow> rows;
  Warnings w;
  for (const auto& s : d.samples) {
    const Restored r = restore(m, s, d.geometry);
    const auto rep = metric_report(r.x_hu, hu_of_mu(s.x_gt), standard_windows(), &w);
    for (auto& row : rows_for(s, rep)) rows.push_back(row);
  }
  write_metrics(run, rows, w);
  run.note("scored " + std::to_string(d.samples.size()) + " samples");
  return 0;
}

int cmd_baseline(const Config& c, const fs::path& run_dir) {
  Run run("baseline", run_dir, c);
  const Dataset d = load_data(c);
  const Baseline b = baseline_kind(c.get_string("baseline.method"));
  std::vector<MetricRow> rows;
  Warnings w;
  for (const auto& s : d.samples) {
    const fs::path out = run.dir / "outputs" / sample_dir_name(s.index);
    fs::create_directories(out);
    if (b == Baseline::li || b == Baseline::nmar) {
      save_qnt(out / "sinogram.qnt", b == Baseline::li ? li_complete(s.s_mc, s.trace, &w)
                                                        : nmar(s.s_mc, s.trace, d.geometry, {}, &w));
    }
    const TensorD hu = hu_of_mu(baseline_reconstruction(s, d.geometry, b, &w));
    save_qnt(out / "x_hu.qnt", hu);
    write_windows(run, sample_dir_name(s.index), hu);
    for (auto& row : rows_for(s, metric_report(hu, hu_of_mu(s.x_gt), standard_windows(), &w))) rows.push_back(row);
  }
  write_metrics(run, rows, w);
  run.note("baseline " + c.get_string("baseline.method") + " on " + std::to_string(d.samples.size()) + " samples");
  return 0;
}

int cmd_robustness(const Config& c, const fs::path& run_dir) {
  Run run("robustness", run_dir, c);
  const Dataset d = load_data(c);
  Model m = load_trained(c.get_string("model.dir"), d.geometry);
  const std::string sweep = c.get_string("robustness.sweep");
  const auto kernels = parse_int_list(c.get_string("robustness.kernels"), "robustness.kernels");
  SweepTable t;
  if (sweep == "trace") {
    if (m.quad) t = run_trace_sweep(m.quad->sfr, d.samples, d.geometry, kernels);
    else if (m.sfr) t = run_trace_sweep(*m.sfr, d.samples, d.geometry, kernels);
    else t = run_trace_sweep(*m.sr, d.samples, d.geometry, kernels);
  } else if (sweep == "mask") {
    if (!m.quad) throw Error("the mask sweep needs a quadnet model, got " + m.kind);
    t = run_mask_sweep(*m.quad, d.samples, kernels);
  } else {
    throw Error("robustness.sweep must be trace or mask, got '" + sweep + "'");
  }
  t.label = m.kind + "_" + t.label;
  auto f = run.open("metrics/robustness_" + sweep + ".csv");
  write_sweep_csv(f, {t});
  run.note(sweep + " sweep ratio (last/first) sino " + std::to_string(t.ratio(&SweepRow::sino_rmse)) + " image " +
           std::to_string(t.ratio(&SweepRow::image_rmse)));
  return 0;
}

int cmd_spectrum(const Config& c, const fs::path& run_dir) {
  Run run("spectrum", run_dir, c);
  TensorD x = load_qnt<double>(c.get_string("spectrum.input"));
  if (x.ndim() == 4 && x.dim(0) == 1 && x.dim(1) == 1) x = x.reshape_values({x.dim(2), x.dim(3)});
  const TensorD s = log_amplitude_spectrum(x);
  save_qnt(run.dir / "outputs" / "spectrum.qnt", s);
  write_pgm(run.dir / "images" / "spectrum.pgm", stretch(s));
  run.note("spectrum of " + to_string(x.shape()) + " written");
  return 0;
}

int cmd_gradcheck(const Config& c, const fs::path& run_dir) {
  Run run("gradcheck", run_dir, c);
  const auto results = run_gradchecks(c.has("gradcheck.filter") ? c.get_string("gradcheck.filter") : "");
  if (results.empty()) throw Error("no gradient check matches the filter");
  auto f = run.open("metrics/gradcheck.csv");
  f << "name,error,seconds,passed\n";
  int failed = 0;
  for (const auto& r : results) {
    const bool ok = r.passed(kGradCheckTolerance);
    failed += !ok;
    f << r.name << "," << r.error << "," << r.seconds << "," << ok << "\n";
    run.note((ok ? "ok   " : "FAIL ") + r.name + " err " + std::to_string(r.error) + (r.failure.empty() ? "" : " " + r.failure));
  }
  if (failed) throw Error(std::to_string(failed) + " of " + std::to_string(results.size()) + " gradient checks failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Metal artifact reduction in fan-beam CT: simulation, training, evaluation"};
  app.set_version_flag("--version", std::string(QUADNET_VERSION));
  app.require_subcommand(1);

  struct Command {
    CLI::App* app;
    Common common;
    std::map<std::string, std::string> defaults;
    int (*fn)(const Config&, const fs::path&);
  };
  std::vector<std::unique_ptr<Command>> cmds;
  auto add = [&](const std::string& name, const std::string& help, std::map<std::string, std::string> defaults,
                 int (*fn)(const Config&, const fs::path&)) -> Command& {
    auto c = std::make_unique<Command>(Command{app.add_subcommand(name, help), {}, std::move(defaults), fn});
    c->common.attach(c->app);
    cmds.push_back(std::move(c));
    return *cmds.back();
  };

  {
    auto& c = add("simulate", "generate a phantom dataset",
                  {{"run.seed", "0"}, {"data.n", "8"}, {"data.noise", "0"}}, cmd_simulate);
    c.common.attach_geometry(c.app);
    c.common.flag<int>(c.app, "--n", "data.n", "number of samples");
    c.common.flag<std::uint64_t>(c.app, "--seed", "run.seed", "dataset seed");
    c.common.flag<int>(c.app, "--noise", "data.noise", "1 adds Poisson noise");
  }
  {
    auto defaults = kModelDefaults;
    defaults.insert({{"run.seed", "0"},
                     {"train.steps", "2000"},
                     {"train.batch_size", "4"},
                     {"train.lr", "5e-4"},
                     {"train.beta1", "0.5"},
                     {"train.beta2", "0.999"},
                     {"train.log_every", "100"}});
    auto& c = add("train", "train Quad-Net or a sinogram network alone", defaults, cmd_train);
    c.common.attach_geometry(c.app);
    c.common.flag<std::string>(c.app, "--data", "data.dir", "dataset directory")->required();
    c.common.flag<std::string>(c.app, "--model", "model.kind", "quadnet | sfr | sr");
    c.common.flag<std::string>(c.app, "--mode", "model.mode", "completion | enhance_trace | enhance_projection");
    c.common.flag<int>(c.app, "--width", "model.width", "base channel width");
    c.common.flag<int>(c.app, "--steps", "train.steps", "optimizer steps");
    c.common.flag<int>(c.app, "--batch", "train.batch_size", "batch size");
    c.common.flag<std::uint64_t>(c.app, "--seed", "run.seed", "initialization and sampling seed");
    c.common.flag<std::string>(c.app, "--augment", "train.augment_kernels", "dilation kernels, e.g. 0,3,5,7");
  }
  for (const auto& [name, help, fn] :
       {std::tuple{"infer", "restore every sample of a dataset with a trained model", cmd_infer},
        std::tuple{"eval", "score a trained model on a dataset", cmd_eval}}) {
    auto& c = add(name, help, {}, fn);
    c.common.flag<std::string>(c.app, "--data", "data.dir", "dataset directory")->required();
    c.common.flag<std::string>(c.app, "--model", "model.dir", "run directory of a train command")->required();
  }
  {
    auto& c = add("baseline", "classical correction and scoring", {{"baseline.method", "li"}}, cmd_baseline);
    c.common.flag<std::string>(c.app, "--data", "data.dir", "dataset directory")->required();
    c.common.flag<std::string>(c.app, "--method", "baseline.method", "none | li | nmar | fsnmar");
  }
  {
    auto& c = add("robustness", "degradation under dilated masks",
                  {{"robustness.sweep", "trace"}, {"robustness.kernels", "0,3,5,7"}}, cmd_robustness);
    c.common.flag<std::string>(c.app, "--data", "data.dir", "dataset directory")->required();
    c.common.flag<std::string>(c.app, "--model", "model.dir", "run directory of a train command")->required();
    c.common.flag<std::string>(c.app, "--sweep", "robustness.sweep", "trace | mask");
    c.common.flag<std::string>(c.app, "--kernels", "robustness.kernels", "comma separated dilation kernels");
  }
  {
    auto& c = add("spectrum", "log-amplitude Fourier image of a sinogram", {}, cmd_spectrum);
    c.common.flag<std::string>(c.app, "--input", "spectrum.input", "QNT1 sinogram")->required();
  }
  {
    auto& c = add("gradcheck", "finite-difference checks of every layer and loss", {}, cmd_gradcheck);
    c.app->add_flag("--all", "run every check (the default)");
    c.common.flag<std::string>(c.app, "--filter", "gradcheck.filter", "only checks whose name contains this");
  }

  std::string active = "quadnet";
  try {
    app.parse(argc, argv);
    for (auto& c : cmds) {
      if (!c->app->parsed()) continue;
      active = c->app->get_name();
      const Config cfg = c->common.merged(c->defaults);
      return c->fn(cfg, c->common.run_dir);
    }
    return 1;
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << nlohmann::json{{"error", "usage"}, {"command", active}, {"message", e.what()}}.dump() << "\n";
    return e.get_exit_code() ? e.get_exit_code() : 2;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "failed"}, {"command", active}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
}
