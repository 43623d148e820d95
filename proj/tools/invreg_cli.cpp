// invreg: data generation, training, attacks, lambda sweeps and the tabular
// theorem checks, each run leaving a manifest that can be replayed.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "invreg/attacks.hpp"
#include "invreg/classifier.hpp"
#include "invreg/data.hpp"
#include "invreg/regularizers.hpp"
#include "invreg/theory_check.hpp"
#include "invreg/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace invreg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitFailed = 3;
constexpr int kExitInconclusive = 4;

/// Bad flags, paths or inputs; maps to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Small helpers

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw ConfigError("not a number: '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty list '" + text + "'");
  return out;
}

std::vector<std::size_t> parse_widths(const std::string& text) {
  std::vector<std::size_t> out;
  for (double v : parse_list(text)) {
    if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v))) throw ConfigError("bad layer width in '" + text + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}


PaddingMode parse_pad(const std::string& text) {
  if (text == "zero") return PaddingMode::constant(0.0);
  if (text == "reflect") return PaddingMode::reflect();
  throw ConfigError("unknown padding '" + text + "' (expected zero or reflect)");
}

std::uint64_t fnv1a_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("cannot create output directory " + dir.string());
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) ensure_dir(file.parent_path());
}

void write_json(const json& j, const fs::path& path) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// A directory holds {train,test}-{images,labels}.idx; anything else is an
/// IDX image file whose label file is passed separately.
Dataset load_data(const std::string& data, const std::string& labels, Split split) {
  const fs::path p(data);
  const std::string prefix = split == Split::Train ? "train" : "test";
  try {
    if (fs::is_directory(p)) return load_idx(p / (prefix + "-images.idx"), p / (prefix + "-labels.idx"), 0, split);
    if (labels.empty()) throw ConfigError("--data " + data + " is not a directory; pass --labels as well");
    return load_idx(p, labels, 0, split);
  } catch (const IdxError& e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------------------
// Per-command configs. Each mirrors its flags and round-trips through JSON so
// a manifest can be replayed.

struct GenConfig {
  std::size_t classes = 4;
  std::size_t size = 24;
  std::size_t per_class = 250;
  std::size_t test_per_class = 100;
  double inherent_rot_deg = 15.0;
  double noise = 0.02;
  std::uint64_t seed = 0;
  std::string out = "data";

  json to_json() const {
    return {{"classes", classes},       {"size", size},   {"per_class", per_class},
            {"test_per_class", test_per_class}, {"inherent_rot_deg", inherent_rot_deg},
            {"noise", noise},           {"seed", seed},   {"out", out}};
  }
  static GenConfig from_json(const json& j) {
    GenConfig c;
    c.classes = j.at("classes");
    c.size = j.at("size");
    c.per_class = j.at("per_class");
    c.test_per_class = j.at("test_per_class");
    c.inherent_rot_deg = j.at("inherent_rot_deg");
    c.noise = j.at("noise");
    c.seed = j.at("seed");
    c.out = j.at("out");
    return c;
  }
};

struct TrainFlags {
  std::string data;
  std::string labels;
  std::string objective = "AT(nat,rnd)";
  double lambda = 0.0;
  bool share_adv_point = false;
  std::size_t iters = 3000;
  std::size_t batch = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double wd = 0.0002;
  std::string aug = "std";
  double max_rot_deg = 30.0;
  double max_trans_px = 3.0;
  int aug_shift_px = 4;
  std::string pad = "zero";
  std::string conv_widths = "8,16";
  std::string dense_widths = "64";
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string out = "run";

  void bind(CLI::App* app) {
    app->add_option("--data", data, "Dataset directory (or IDX image file)")->required();
    app->add_option("--labels", labels, "IDX label file when --data is a file");
    app->add_option("--objective", objective, "REG(batch,def), e.g. KL(rob,wo10)")->capture_default_str();
    app->add_option("--lambda", lambda, "Regularization weight")->capture_default_str();
    app->add_flag("--share-adv-point", share_adv_point, "L2/KL reuse the CE search point");
    app->add_option("--iters", iters, "SGD steps")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--batch", batch, "Unique images per step")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--lr", lr, "Initial learning rate")->capture_default_str();
    app->add_option("--momentum", momentum)->capture_default_str();
    app->add_option("--wd", wd, "Weight decay")->capture_default_str();
    app->add_option("--aug", aug, "std, std*, flip-only or none")->capture_default_str();
    app->add_option("--max-rot-deg", max_rot_deg)->capture_default_str();
    app->add_option("--max-trans-px", max_trans_px)->capture_default_str();
    app->add_option("--aug-shift-px", aug_shift_px, "Shift range of the std augmentation")->capture_default_str();
    app->add_option("--pad", pad, "zero or reflect")->capture_default_str();
    app->add_option("--conv-widths", conv_widths)->capture_default_str();
    app->add_option("--dense-widths", dense_widths)->capture_default_str();
    app->add_option("--seed", seed)->capture_default_str();
    app->add_option("--threads", threads, "Workers for the per-example searches")->capture_default_str();
  }

  json to_json() const {
    return {{"data", data},
            {"labels", labels},
            {"objective", objective},
            {"lambda", lambda},
            {"share_adv_point", share_adv_point},
            {"iters", iters},
            {"batch", batch},
            {"lr", lr},
            {"momentum", momentum},
            {"wd", wd},
            {"aug", aug},
            {"max_rot_deg", max_rot_deg},
            {"max_trans_px", max_trans_px},
            {"aug_shift_px", aug_shift_px},
            {"pad", pad},
            {"conv_widths", conv_widths},
            {"dense_widths", dense_widths},
            {"seed", seed},
            {"threads", threads},
            {"out", out}};
  }
  void read_json(const json& j) {
    data = j.at("data");
    labels = j.at("labels");
    objective = j.at("objective");
    lambda = j.at("lambda");
    share_adv_point = j.at("share_adv_point");
    iters = j.at("iters");
    batch = j.at("batch");
    lr = j.at("lr");
    momentum = j.at("momentum");
    wd = j.at("wd");
    aug = j.at("aug");
    max_rot_deg = j.at("max_rot_deg");
    max_trans_px = j.at("max_trans_px");
    aug_shift_px = j.at("aug_shift_px");
    pad = j.at("pad");
    conv_widths = j.at("conv_widths");
    dense_widths = j.at("dense_widths");
    seed = j.at("seed");
    threads = j.at("threads");
    out = j.at("out");
  }

  TrainConfig resolve(double lam) const {
    TrainConfig c;
    c.lr0 = lr;
    c.momentum = momentum;
    c.weight_decay = wd;
    c.iterations = iters;
    c.batch_size = batch;
    c.objective = parse_objective(objective, lam);
    c.objective.share_adv_point = share_adv_point;
    c.augmentation = parse_augmentation(aug);
    c.max_rot_deg = max_rot_deg;
    c.max_trans_px = max_trans_px;
    c.aug_shift_px = aug_shift_px;
    c.pad = parse_pad(pad);
    c.seed = seed;
    c.threads = threads;
    c.validate();
    return c;
  }

  Architecture architecture(const Dataset& d) const {
    Architecture a;
    a.height = d.height;
    a.width = d.width;
    a.channels = d.channels;
    a.classes = d.classes;
    a.conv_widths = parse_widths(conv_widths);
    a.dense_widths = parse_widths(dense_widths);
    a.validate();
    return a;
  }
};

struct AttackFlags {
  std::string model;
  std::string data;
  std::string labels;
  std::string split = "test";
  std::string grid = "5x5x31";
  std::string attack = "grid";
  std::size_t spgd_steps = 5;
  std::uint64_t seed = 0;
  double max_rot_deg = 30.0;
  double max_trans_px = 3.0;
  std::string pad = "zero";
  bool early_stop = false;
  std::size_t threads = 1;
  std::string report = "report.json";
  std::string csv;
  std::string per_angle_map;
  std::size_t angles = 61;

  void bind(CLI::App* app, bool with_model) {
    if (with_model) {
      app->add_option("--model", model, "Checkpoint")->required();
      app->add_option("--data", data, "Dataset directory (or IDX image file)")->required();
      app->add_option("--labels", labels, "IDX label file when --data is a file");
      app->add_option("--split", split, "train or test")->capture_default_str();
      app->add_option("--report", report, "AttackReport JSON")->capture_default_str();
      app->add_option("--csv", csv, "Per-example CSV");
      app->add_option("--per-angle-map", per_angle_map, "Write the rotation-only misclassification map (CSV)");
      app->add_option("--angles", angles, "Angles of the per-angle map")->capture_default_str();
    }
    app->add_option("--grid", grid, "AxBxC, '+' joins grids into a union (5x5x31+10x10x75)")->capture_default_str();
    app->add_option("--attack", attack, "grid or spgd")->capture_default_str();
    app->add_option("--spgd-steps", spgd_steps)->capture_default_str();
    app->add_option("--attack-seed", seed, "Seed of the S-PGD starts")->capture_default_str();
    app->add_option("--attack-rot-deg", max_rot_deg, "Attack rotation range")->capture_default_str();
    app->add_option("--attack-trans-px", max_trans_px, "Attack translation range")->capture_default_str();
    app->add_option("--attack-pad", pad, "zero or reflect")->capture_default_str();
    app->add_flag("--early-stop", early_stop, "Stop each example at its first misclassification");
  }

  json to_json() const {
    return {{"model", model},   {"data", data},
            {"labels", labels}, {"split", split},
            {"grid", grid},     {"attack", attack},
            {"spgd_steps", spgd_steps}, {"seed", seed},
            {"max_rot_deg", max_rot_deg}, {"max_trans_px", max_trans_px},
            {"pad", pad},       {"early_stop", early_stop},
            {"threads", threads}, {"report", report},
            {"csv", csv},       {"per_angle_map", per_angle_map},
            {"angles", angles}};
  }
  void read_json(const json& j) {
    model = j.at("model");
    data = j.at("data");
    labels = j.at("labels");
    split = j.at("split");
    grid = j.at("grid");
    attack = j.at("attack");
    spgd_steps = j.at("spgd_steps");
    seed = j.at("seed");
    max_rot_deg = j.at("max_rot_deg");
    max_trans_px = j.at("max_trans_px");
    pad = j.at("pad");
    early_stop = j.at("early_stop");
    threads = j.at("threads");
    report = j.at("report");
    csv = j.at("csv");
    per_angle_map = j.at("per_angle_map");
    angles = j.at("angles");
  }

  Split split_kind() const {
    if (split == "train") return Split::Train;
    if (split == "test") return Split::Test;
    throw ConfigError("unknown split '" + split + "'");
  }

  std::vector<GridSpec> grids(const SearchSet& set) const {
    std::vector<GridSpec> out;
    std::stringstream ss(grid);
    std::string part;
    while (std::getline(ss, part, '+')) out.push_back(GridSpec::parse(part, set));
    if (out.empty()) throw ConfigError("empty --grid");
    return out;
  }

  AttackOptions options() const {
    AttackOptions o;
    o.pad = parse_pad(pad);
    o.early_stop = early_stop;
    o.threads = threads;
    return o;
  }

  AttackReport run(const Classifier& m, const Dataset& d) const {
    const SearchSet set = build_search_set(max_rot_deg, max_trans_px, d.width, d.height);
    if (attack == "grid") return grid_attack(m, d, grids(set), options());
    if (attack == "spgd") return spgd_attack(m, d, set, spgd_steps, {0.03, 0.03, 0.3}, seed, options());
    throw ConfigError("unknown --attack '" + attack + "' (expected grid or spgd)");
  }
};

struct TheoryFlags {
  std::size_t seeds = 100;
  std::string theorem = "both";
  double tol = -1.0;  // negative: 1e-4 (theorem 1) and 1e-6 (theorem 2)
  std::uint64_t first_seed = 0;
  std::string out;

  json to_json() const {
    return {{"seeds", seeds}, {"theorem", theorem}, {"tol", tol}, {"first_seed", first_seed}, {"out", out}};
  }
  void read_json(const json& j) {
    seeds = j.at("seeds");
    theorem = j.at("theorem");
    tol = j.at("tol");
    first_seed = j.at("first_seed");
    out = j.at("out");
  }
};

// ---------------------------------------------------------------------------
// Manifests

struct Manifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  json artifacts = json::object();
  json extra = json::object();

  void add_artifact(const std::string& name, const fs::path& path) {
    artifacts[name] = {{"path", path.string()},
                       {"bytes", fs::file_size(path)},
                       {"fnv1a64", hex64(fnv1a_file(path))}};
  }

  void write(const fs::path& path, double wall_seconds) const {
    char stamp[32];
    const std::time_t now = std::time(nullptr);
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    json j;
    j["command"] = command;
    j["tool_version"] = std::string("invreg ") + INVREG_VERSION;
    j["seed"] = seed;
    j["threads"] = threads;
    j["config"] = config;
    j["artifacts"] = artifacts;
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    j["finished_utc"] = stamp;
    j["wall_clock_seconds"] = wall_seconds;
    write_json(j, path);
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

// ---------------------------------------------------------------------------
// Commands

int run_gen(const GenConfig& c) {
  const auto start = Clock::now();
  GlyphSpec spec;
  if (c.classes < 2 || c.classes > spec.shapes.size()) {
    throw ConfigError("--classes must lie in [2, " + std::to_string(spec.shapes.size()) + "]");
  }
  spec.shapes.resize(c.classes);
  spec.size = c.size;
  spec.inherent_rot_deg = c.inherent_rot_deg;
  spec.noise = c.noise;
  Dataset train, test;
  try {
    train = gen_glyphs(spec, c.per_class, c.seed, Split::Train);
    test = gen_glyphs(spec, c.test_per_class, c.seed, Split::Test);
    check_label_invariance(spec, train);
  } catch (const GlyphSeparationError& e) {
    throw ConfigError(e.what());
  }
  const fs::path dir(c.out);
  ensure_dir(dir);
  Manifest m{"gen-data", c.to_json(), c.seed, 1};
  for (const auto& [name, d] : {std::pair<std::string, const Dataset*>{"train", &train}, {"test", &test}}) {
    const auto images = dir / (name + "-images.idx"), labels = dir / (name + "-labels.idx");
    write_idx(*d, images, labels);
    m.add_artifact(name + "_images", images);
    m.add_artifact(name + "_labels", labels);
  }
  m.extra["train_examples"] = train.size();
  m.extra["test_examples"] = test.size();
  m.write(dir / "manifest.json", seconds_since(start));
  std::printf("wrote %zu train and %zu test glyphs (%zux%zu, %zu classes) to %s\n", train.size(), test.size(), c.size,
              c.size, c.classes, dir.string().c_str());
  return kExitOk;
}

struct TrainOutcome {
  Classifier model;
  std::vector<TrainLogRow> log;
};

/// Trains into `dir` (checkpoint + log). On divergence the last finite
/// parameters are saved as model.last_good.ckpt and the error is rethrown.
TrainOutcome train_into(const TrainFlags& f, double lambda, const Dataset& data, const fs::path& dir,
                        Manifest& manifest, const std::string& prefix) {
  const TrainConfig cfg = f.resolve(lambda);
  const Architecture arch = f.architecture(data);
  ensure_dir(dir);
  try {
    TrainResult r = train(cfg, data, Classifier::create(arch, f.seed));
    const auto ckpt = dir / "model.ckpt", log = dir / "train_log.csv";
    save_checkpoint(r.model, ckpt);
    write_log_csv(r.log, log, false);
    manifest.add_artifact(prefix + "checkpoint", ckpt);
    manifest.add_artifact(prefix + "train_log", log);
    // Evaluate the stored (32-bit rounded) parameters so reloads agree.
    return {load_checkpoint(ckpt), std::move(r.log)};
  } catch (const TrainingDiverged& e) {
    save_checkpoint(e.last_good(), dir / "model.last_good.ckpt");
    write_log_csv(e.log(), dir / "train_log.csv", false);
    throw;
  }
}

int run_train(const TrainFlags& f) {
  const auto start = Clock::now();
  const Dataset data = load_data(f.data, f.labels, Split::Train);
  const fs::path dir(f.out);
  Manifest m{"train", f.to_json(), f.seed, f.threads};
  const auto r = train_into(f, f.lambda, data, dir, m, "");
  const TrainConfig cfg = f.resolve(f.lambda);
  m.extra["objective_resolved"] = cfg.objective.to_string();
  m.extra["augmentation_effective"] = to_string(cfg.effective_augmentation());
  m.extra["final_loss"] = r.log.back().total_loss;
  m.write(dir / "manifest.json", seconds_since(start));
  std::printf("trained %s (lambda %g) for %zu steps, final loss %.6f -> %s\n", cfg.objective.to_string().c_str(),
              f.lambda, cfg.iterations, r.log.back().total_loss, (dir / "model.ckpt").string().c_str());
  return kExitOk;
}

void check_compatible(const Classifier& model, const Dataset& data, const std::string& what) {
  const auto& a = model.architecture();
  if (a.height != data.height || a.width != data.width || a.channels != data.channels || a.classes != data.classes) {
    std::ostringstream os;
    os << what << " expects " << a.height << "x" << a.width << "x" << a.channels << " images with " << a.classes
       << " classes, data has " << data.height << "x" << data.width << "x" << data.channels << " with "
       << data.classes;
    throw ConfigError(os.str());
  }
}

int run_attack(const AttackFlags& f) {
  const auto start = Clock::now();
  Classifier model;
  try {
    model = load_checkpoint(f.model);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  const Dataset data = load_data(f.data, f.labels, f.split_kind());
  check_compatible(model, data, "checkpoint " + f.model);
  const AttackReport report = f.run(model, data);

  Manifest m{"attack", f.to_json(), f.seed, f.threads};
  const fs::path rp(f.report);
  ensure_parent(rp);
  write_report_json(report, rp);
  m.add_artifact("report", rp);
  if (!f.csv.empty()) {
    ensure_parent(f.csv);
    write_report_csv(report, f.csv);
    m.add_artifact("report_csv", f.csv);
  }
  if (!f.per_angle_map.empty()) {
    const SearchSet set = build_search_set(f.max_rot_deg, f.max_trans_px, data.width, data.height);
    const auto bitmap = per_angle_map(model, data, f.angles, set, f.options());
    std::vector<double> deg = grid_axis(f.max_rot_deg, f.angles);
    ensure_parent(f.per_angle_map);
    write_angle_map_csv(bitmap, deg, f.per_angle_map);
    m.add_artifact("per_angle_map", f.per_angle_map);
  }
  m.extra["natural_accuracy"] = report.natural_accuracy;
  m.extra["grid_accuracy"] = report.grid_accuracy;
  fs::path mp = rp;
  mp.replace_extension(".manifest.json");
  m.write(mp, seconds_since(start));
  std::printf("%s attack (%s, %zu candidates): natural %.4f, adversarial %.4f over %zu examples\n", f.attack.c_str(),
              report.grid.c_str(), report.candidates_per_example, report.natural_accuracy, report.grid_accuracy,
              report.examples.size());
  return kExitOk;
}

struct SweepFlags {
  TrainFlags train;
  AttackFlags attack;
  std::string lambdas = "0,0.1,0.3,1,3";
  std::string test_data;
  std::string test_labels;

  json to_json() const {
    return {{"lambdas", lambdas}, {"test_data", test_data}, {"test_labels", test_labels},
            {"train", train.to_json()}, {"attack", attack.to_json()}};
  }
  void read_json(const json& j) {
    lambdas = j.at("lambdas");
    test_data = j.at("test_data");
    test_labels = j.at("test_labels");
    train.read_json(j.at("train"));
    attack.read_json(j.at("attack"));
  }
};

int run_sweep(SweepFlags f) {
  const auto start = Clock::now();
  const auto lambdas = parse_list(f.lambdas);
  f.train.resolve(lambdas.front());  // validate before the long runs
  const Dataset train_data = load_data(f.train.data, f.train.labels, Split::Train);
  const std::string test_dir = f.test_data.empty() ? f.train.data : f.test_data;
  const Dataset test_data = load_data(test_dir, f.test_data.empty() ? f.train.labels : f.test_labels, Split::Test);
  f.attack.threads = f.train.threads;
  const fs::path dir(f.train.out);
  ensure_dir(dir);
  Manifest m{"sweep-lambda", f.to_json(), f.train.seed, f.train.threads};

  const fs::path csv = dir / "sweep.csv";
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + csv.string());
  out << "lambda,natural_accuracy,grid_accuracy\n";
  json rows = json::array();
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    const double lam = lambdas[i];
    const auto run_dir = dir / ("lambda_" + std::to_string(i));
    const auto r = train_into(f.train, lam, train_data, run_dir, m, "lambda_" + std::to_string(i) + "_");
    check_compatible(r.model, test_data, "trained model");
    const AttackReport report = f.attack.run(r.model, test_data);
    char line[128];
    std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g", lam, report.natural_accuracy, report.grid_accuracy);
    out << line << "\n" << std::flush;
    rows.push_back({{"lambda", lam}, {"natural_accuracy", report.natural_accuracy},
                    {"grid_accuracy", report.grid_accuracy}});
    std::printf("lambda %-8g natural %.4f grid %.4f\n", lam, report.natural_accuracy, report.grid_accuracy);
    std::fflush(stdout);
  }
  out.close();
  m.add_artifact("sweep_csv", csv);
  m.extra["rows"] = rows;
  m.write(dir / "manifest.json", seconds_since(start));
  return kExitOk;
}

int run_theory(const TheoryFlags& f) {
  const auto start = Clock::now();
  if (f.theorem != "1" && f.theorem != "2" && f.theorem != "both") {
    throw ConfigError("--theorem must be 1, 2 or both");
  }
  if (f.seeds == 0) throw ConfigError("--seeds must be positive");
  std::size_t failed = 0, inconclusive = 0, passed = 0;
  json certs = json::array();
  json instances = json::array();
  auto run = [&](int theorem) {
    RandomProblemOptions opts;
    opts.conditionally_independent = theorem == 2;
    const double tol = f.tol >= 0.0 ? f.tol : (theorem == 1 ? 1e-4 : 1e-6);
    for (std::size_t i = 0; i < f.seeds; ++i) {
      const std::uint64_t seed = f.first_seed + i;
      const TabularProblem problem = random_problem(seed, opts);
      const Certificate c = theorem == 1 ? check_theorem1(problem, tol) : check_theorem2(problem, tol);
      instances.push_back({{"theorem", theorem}, {"seed", seed}, {"problem_hash", hex64(problem.hash())},
                           {"points", problem.points()}, {"cells", problem.cells()}, {"classes", problem.classes}});
      json cj = json::parse(c.to_json());
      cj["seed"] = seed;
      certs.push_back(cj);
      switch (c.status) {
        case CertificateStatus::Pass:
          ++passed;
          break;
        case CertificateStatus::Inconclusive:
          ++inconclusive;
          break;
        default:
          ++failed;
          std::printf("theorem %d seed %llu: %s (%s)\n", theorem, static_cast<unsigned long long>(seed),
                      to_string(c.status).c_str(), c.note.c_str());
      }
    }
  };
  if (f.theorem != "2") run(1);
  if (f.theorem != "1") run(2);

  Manifest m{"theory-check", f.to_json(), f.first_seed, 1};
  m.extra["instances"] = instances;
  m.extra["passed"] = passed;
  m.extra["failed"] = failed;
  m.extra["inconclusive"] = inconclusive;
  if (!f.out.empty()) {
    const fs::path dir(f.out);
    ensure_dir(dir);
    write_json(certs, dir / "certificates.json");
    m.add_artifact("certificates", dir / "certificates.json");
    m.write(dir / "manifest.json", seconds_since(start));
  }
  std::printf("theory-check: %zu passed, %zu failed, %zu inconclusive\n", passed, failed, inconclusive);
  if (failed > 0) return kExitFailed;
  if (inconclusive > 0) return kExitInconclusive;
  return kExitOk;
}

// Output locations are rewritten under `root` when replaying elsewhere.
std::string relocate(const std::string& path, const std::string& root) {
  if (root.empty() || path.empty()) return path;
  return (fs::path(root) / fs::path(path).filename()).string();
}

int replay(const std::string& manifest_path, const std::string& root) {
  const json m = read_json(manifest_path);
  const std::string cmd = m.at("command");
  const json& cfg = m.at("config");
  try {
    if (cmd == "gen-data") {
      GenConfig c = GenConfig::from_json(cfg);
      c.out = relocate(c.out, root);
      return run_gen(c);
    }
    if (cmd == "train") {
      TrainFlags f;
      f.read_json(cfg);
      f.out = relocate(f.out, root);
      return run_train(f);
    }
    if (cmd == "attack") {
      AttackFlags f;
      f.read_json(cfg);
      f.report = relocate(f.report, root);
      f.csv = relocate(f.csv, root);
      f.per_angle_map = relocate(f.per_angle_map, root);
      return run_attack(f);
    }
    if (cmd == "sweep-lambda") {
      SweepFlags f;
      f.read_json(cfg);
      f.train.out = relocate(f.train.out, root);
      return run_sweep(f);
    }
    if (cmd == "theory-check") {
      TheoryFlags f;
      f.read_json(cfg);
      f.out = relocate(f.out, root);
      return run_theory(f);
    }
  } catch (const json::exception& e) {
    throw ConfigError(manifest_path + ": malformed config (" + e.what() + ")");
  }
  throw ConfigError(manifest_path + ": unknown command '" + cmd + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Regularized training for rotation and translation invariance, with spatial attacks"};
  app.set_version_flag("--version", std::string("invreg ") + INVREG_VERSION);
  app.set_config("--config", "", "TOML/INI file mirroring the flags ([train], [attack], ... sections)");
  std::string from_manifest, replay_root;
  app.add_option("--from-manifest", from_manifest, "Replay the run recorded in a manifest");
  app.add_option("--replay-into", replay_root, "With --from-manifest: write outputs into this directory");

  GenConfig gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic glyph dataset (IDX)");
  gen_cmd->add_option("--classes", gen.classes)->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "Image side in pixels")->capture_default_str();
  gen_cmd->add_option("--per-class", gen.per_class, "Training images per class")->capture_default_str();
  gen_cmd->add_option("--test-per-class", gen.test_per_class)->capture_default_str();
  gen_cmd->add_option("--inherent-rot-deg", gen.inherent_rot_deg)->capture_default_str();
  gen_cmd->add_option("--noise", gen.noise)->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->capture_default_str();

  TrainFlags tr;
  auto* train_cmd = app.add_subcommand("train", "Train a classifier with a regularized objective");
  tr.bind(train_cmd);
  train_cmd->add_option("--out", tr.out, "Output directory")->capture_default_str();

  AttackFlags at;
  auto* attack_cmd = app.add_subcommand("attack", "Grid (or S-PGD) attack on a checkpoint");
  at.bind(attack_cmd, true);
  attack_cmd->add_option("--threads", at.threads)->capture_default_str();

  SweepFlags sw;
  auto* sweep_cmd = app.add_subcommand("sweep-lambda", "Train and attack once per lambda");
  sw.train.bind(sweep_cmd);
  sw.attack.bind(sweep_cmd, false);
  sweep_cmd->add_option("--lambdas", sw.lambdas, "Comma-separated list")->capture_default_str();
  sweep_cmd->add_option("--test-data", sw.test_data, "Evaluation data (default: the test split of --data)");
  sweep_cmd->add_option("--test-labels", sw.test_labels);
  sweep_cmd->add_option("--out", sw.train.out, "Output directory")->capture_default_str();

  TheoryFlags th;
  auto* theory_cmd = app.add_subcommand("theory-check", "Certify both theorems on random tabular instances");
  theory_cmd->add_option("--seeds", th.seeds, "Instances per theorem")->capture_default_str();
  theory_cmd->add_option("--first-seed", th.first_seed)->capture_default_str();
  theory_cmd->add_option("--theorem", th.theorem, "1, 2 or both")->capture_default_str();
  theory_cmd->add_option("--tol", th.tol, "Tolerance (default 1e-4 for theorem 1, 1e-6 for theorem 2)");
  theory_cmd->add_option("--out", th.out, "Directory for certificates.json and the manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (!from_manifest.empty()) return replay(from_manifest, replay_root);
    if (*gen_cmd) return run_gen(gen);
    if (*train_cmd) return run_train(tr);
    if (*attack_cmd) return run_attack(at);
    if (*sweep_cmd) return run_sweep(sw);
    if (*theory_cmd) return run_theory(th);
    std::cerr << app.help();
    return kExitConfig;
  } catch (const ObjectiveParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << " (last finite parameters saved as model.last_good.ckpt)\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
