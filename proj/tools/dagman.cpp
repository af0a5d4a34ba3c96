// dagman: command-line front end for data generation, pretraining, probing
// and the attention/cluster diagnostics. Every command writes manifest.json
// next to its artifacts.

#include <Eigen/Core>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dagman/dagman.hpp"

namespace fs = std::filesystem;
using namespace dagman;

namespace {

constexpr const char* kToolVersion = "0.1.0";

enum Exit { kOk = 0, kUsage = 2, kValidation = 3, kIo = 4, kNumeric = 5 };

bool deterministic_mode() {
  const char* v = std::getenv("DAGMAN_DETERMINISTIC");
  return v && std::string(v) == "1";
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(p.filename().string(), std::string("malformed JSON: ") + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("cannot write " + p.string());
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw IoError("cannot create output directory " + p.string());
}

std::vector<fs::path> volume_files(const fs::path& data) {
  std::vector<fs::path> files;
  if (fs::is_regular_file(data)) return {data};
  if (!fs::is_directory(data)) throw IoError("data path does not exist: " + data.string());
  for (const auto& e : fs::directory_iterator(data))
    if (e.is_regular_file() && e.path().extension() == ".vol") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

std::vector<Volume> load_volumes(const std::vector<fs::path>& files) {
  std::vector<Volume> v;
  v.reserve(files.size());
  for (const auto& f : files) v.push_back(load_volume(f));
  return v;
}

// labels.csv: header "filename,class_id", one row per volume.
std::map<std::string, int> read_labels(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open labels " + p.string());
  std::map<std::string, int> out;
  std::string line;
  std::getline(in, line);
  if (line.rfind("filename,class_id", 0) != 0) throw ValidationError("labels", "expected header 'filename,class_id'");
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ValidationError("labels", "row " + std::to_string(row) + " has no comma");
    try {
      out[line.substr(0, comma)] = std::stoi(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw ValidationError("labels", "row " + std::to_string(row) + " has a non-integer class id");
    }
  }
  return out;
}

struct LabeledData {
  std::vector<fs::path> files;
  std::vector<Volume> volumes;
  std::vector<int> labels;
};

LabeledData load_labeled(const fs::path& data, fs::path labels_path) {
  if (labels_path.empty()) labels_path = data / "labels.csv";
  const auto labels = read_labels(labels_path);
  LabeledData d;
  d.files = volume_files(data);
  if (d.files.size() != labels.size())
    throw ValidationError("labels", "labels.csv lists " + std::to_string(labels.size()) + " volumes but " +
                                        data.string() + " holds " + std::to_string(d.files.size()));
  for (const auto& f : d.files) {
    const auto it = labels.find(f.filename().string());
    if (it == labels.end()) throw ValidationError("labels", "no label for " + f.filename().string());
    d.labels.push_back(it->second);
  }
  d.volumes = load_volumes(d.files);
  return d;
}

std::string param_digest(const ParamSet<float>& ps) {
  std::uint32_t crc = 0;
  for (const auto& p : ps.items())
    crc = static_cast<std::uint32_t>(::crc32(crc, reinterpret_cast<const Bytef*>(p.var->value.data()),
                                             static_cast<uInt>(p.var->value.size() * sizeof(float))));
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << crc;
  return os.str();
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  std::uint64_t seed = 0;
  json artifacts = json::array();
  json extra = json::object();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void artifact(const fs::path& p) { artifacts.push_back(p.string()); }

  void write(const fs::path& out_dir) const {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json j{{"command", command},
           {"argv", argv},
           {"config", config},
           {"seed", seed},
           {"artifacts", artifacts},
           {"tool_version", kToolVersion},
           {"deterministic", deterministic_mode()},
           {"started_utc", utc_now()},
           {"wall_clock_seconds", secs}};
    for (const auto& [k, v] : extra.items()) j[k] = v;
    write_text(out_dir / "manifest.json", j.dump(2) + "\n");
  }
};

std::unique_ptr<Network<float>> load_teacher(const fs::path& ckpt, PretrainConfig* cfg_out = nullptr) {
  auto ck = load_checkpoint<float>(ckpt);
  if (cfg_out) *cfg_out = ck.config;
  return std::move(ck.state.teacher);
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string spec, out;
  int count = 0;
  int num_classes = 0;
  std::uint64_t seed = 0;
};

void cmd_gen_data(const GenArgs& a, Manifest& m) {
  SyntheticSpec base;
  if (!a.spec.empty()) from_json(read_json_file(a.spec), base);
  if (a.num_classes > 0) base.num_classes = a.num_classes;
  base.class_id = 0;
  base.validate();
  const fs::path out(a.out);
  ensure_dir(out);
  std::ostringstream labels;
  labels << "filename,class_id\n";
  for (int i = 0; i < a.count; ++i) {
    SyntheticSpec s = base;
    s.class_id = i % base.num_classes;
    std::ostringstream name;
    name << "vol_" << std::setw(5) << std::setfill('0') << i << ".vol";
    save_volume(generate_synthetic_volume(s, stream_key(a.seed, {static_cast<std::uint64_t>(i)})), out / name.str());
    labels << name.str() << ',' << s.class_id << '\n';
  }
  write_text(out / "labels.csv", labels.str());
  m.config = to_json(base);
  m.config.erase("class_id");
  m.seed = a.seed;
  m.artifact(out / "labels.csv");
  m.extra["count"] = a.count;
}

struct PretrainArgs {
  std::string config, data, out, strategy;
  bool no_noisy_teacher = false;
  int steps = -1;
  std::int64_t seed = -1;
};

void cmd_pretrain(const PretrainArgs& a, Manifest& m) {
  json j = a.config.empty() ? json::object() : read_json_file(a.config);
  if (!a.strategy.empty()) j["masking_strategy"] = a.strategy;
  if (a.no_noisy_teacher) j["noisy_teacher"] = false;
  if (a.steps >= 0) j["steps"] = a.steps;
  if (a.seed >= 0) j["seed"] = a.seed;
  PretrainConfig cfg;
  from_json(j, cfg);
  // A shortened run keeps its warmup inside the step budget.
  if (a.steps >= 0 && cfg.warmup_steps > cfg.steps) cfg.warmup_steps = cfg.steps;
  cfg.validate();

  const auto volumes = load_volumes(volume_files(a.data));
  if (volumes.empty()) throw ValidationError("data", "no .vol files in " + a.data);
  const fs::path out(a.out);
  ensure_dir(out);
  PretrainOptions opts;
  opts.loss_csv = out / "loss.csv";
  opts.checkpoint_path = out / "checkpoint.dgmn";
  const auto trainer = pretrain<float>(cfg, volumes, opts);
  const auto& c = trainer.counters();
  m.config = to_json(cfg);
  m.seed = cfg.seed;
  m.artifact(opts.loss_csv);
  m.artifact(opts.checkpoint_path);
  m.extra["counters"] = {{"satt_passes", c.satt_passes},         {"attention_masks", c.attention_masks},
                         {"low_attention_masks", c.low_attention_masks}, {"random_masks", c.random_masks},
                         {"blockwise_masks", c.blockwise_masks},   {"patch_dropouts", c.patch_dropouts},
                         {"teacher_passes", c.teacher_passes},     {"student_passes", c.student_passes}};
  m.extra["volumes"] = volumes.size();
}

struct ProbeArgs {
  std::string ckpt, data, labels, out, mode = "lp";
  double train_frac = 1.0;
  double test_frac = 0.5;
  int epochs = -1;
  std::uint64_t seed = 0;
};

void cmd_probe(const ProbeArgs& a, Manifest& m, bool finetune_cmd) {
  ProbeMode mode = a.mode == "ft" ? ProbeMode::ft : ProbeMode::lp;
  if (finetune_cmd) mode = ProbeMode::ft;
  PretrainConfig cfg;
  auto net = load_teacher(a.ckpt, &cfg);
  const auto d = load_labeled(a.data, a.labels);
  ProbeOptions opt;
  opt.train_fraction = a.train_frac;
  opt.test_fraction = a.test_frac;
  opt.seed = a.seed;
  if (a.epochs >= 0) (mode == ProbeMode::lp ? opt.epochs : opt.ft_epochs) = a.epochs;
  const std::string before = param_digest(net->params());
  const ProbeResult r = mode == ProbeMode::lp ? linear_probe(*net, d.volumes, d.labels, opt)
                                              : fine_tune(*net, d.volumes, d.labels, opt);
  const fs::path out(a.out);
  ensure_dir(out);
  write_text(out / "metrics.json", to_json(r).dump(2) + "\n");
  m.config = {{"checkpoint_config", to_json(cfg)},
              {"mode", probe_mode_name(mode)},
              {"train_frac", opt.train_fraction},
              {"test_frac", opt.test_fraction},
              {"epochs", mode == ProbeMode::lp ? opt.epochs : opt.ft_epochs},
              {"lr", mode == ProbeMode::lp ? opt.lr : opt.ft_lr}};
  m.seed = a.seed;
  m.artifact(out / "metrics.json");
  m.extra["encoder_digest_before"] = before;
  m.extra["encoder_digest_after"] = param_digest(net->params());
}

struct DiagArgs {
  std::string ckpt, data, labels, out;
  int bins = 16;
  int limit = 0;
};

void cmd_attn_entropy(const DiagArgs& a, Manifest& m) {
  PretrainConfig cfg;
  auto net = load_teacher(a.ckpt, &cfg);
  auto files = volume_files(a.data);
  if (a.limit > 0 && files.size() > static_cast<std::size_t>(a.limit)) files.resize(static_cast<std::size_t>(a.limit));
  const auto rep = attention_distance_entropy(*net, load_volumes(files), a.bins);
  const fs::path out(a.out);
  ensure_dir(out);
  write_text(out / "entropy.json", to_json(rep).dump(2) + "\n");
  m.config = {{"checkpoint_config", to_json(cfg)}, {"bins", a.bins}, {"volumes", files.size()}};
  m.artifact(out / "entropy.json");
}

void cmd_attn_map(const DiagArgs& a, Manifest& m) {
  PretrainConfig cfg;
  auto net = load_teacher(a.ckpt, &cfg);
  auto files = volume_files(a.data);
  if (a.limit > 0 && files.size() > static_cast<std::size_t>(a.limit)) files.resize(static_cast<std::size_t>(a.limit));
  const fs::path out(a.out);
  ensure_dir(out);
  for (const auto& f : files) {
    const AttentionMap map = extract_attention_map(*net, load_volume(f));
    const fs::path dst = out / (f.stem().string() + "_attn.vol");
    save_volume(map.to_volume(), dst);
    m.artifact(dst);
  }
  m.config = {{"checkpoint_config", to_json(cfg)}, {"volumes", files.size()}};
}

void cmd_cluster(const DiagArgs& a, Manifest& m) {
  PretrainConfig cfg;
  auto net = load_teacher(a.ckpt, &cfg);
  const auto d = load_labeled(a.data, a.labels);
  const auto rep = cluster_metrics(extract_features(*net, d.volumes), d.labels);
  const fs::path out(a.out);
  ensure_dir(out);
  json j = to_json(rep);
  j["ratio"] = rep.ratio();
  write_text(out / "cluster.json", j.dump(2) + "\n");
  m.config = {{"checkpoint_config", to_json(cfg)}, {"volumes", d.volumes.size()}};
  m.artifact(out / "cluster.json");
}

void cmd_show_config(const std::string& path) {
  PretrainConfig cfg = pretrain_config_from_json(path.empty() ? json::object() : read_json_file(path));
  std::cout << to_json(cfg).dump(2) << '\n';
}

int run(int argc, char** argv);

// Re-executes the command recorded in a manifest, optionally redirecting --out.
int replay(const std::string& manifest_path, const std::string& out) {
  const json j = read_json_file(manifest_path);
  auto args = j.at("argv").get<std::vector<std::string>>();
  if (!out.empty())
    for (std::size_t i = 0; i + 1 < args.size(); ++i)
      if (args[i] == "--out") args[i + 1] = out;
  std::vector<char*> ptrs;
  for (auto& s : args) ptrs.push_back(s.data());
  return run(static_cast<int>(ptrs.size()), ptrs.data());
}

int run(int argc, char** argv) {
  CLI::App app{"Attention-guided masked distillation for volumetric encoders"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write labelled synthetic .vol volumes");
  gen_cmd->add_option("--spec", gen.spec, "SyntheticSpec JSON file")->check(CLI::ExistingFile);
  gen_cmd->add_option("--count", gen.count, "Number of volumes")->required()->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Base seed");
  gen_cmd->add_option("--num-classes", gen.num_classes, "Overrides the spec's class count")->check(CLI::PositiveNumber);

  PretrainArgs pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Self-supervised pretraining");
  pre_cmd->add_option("--config", pre.config, "PretrainConfig JSON file")->check(CLI::ExistingFile);
  pre_cmd->add_option("--data", pre.data, "Directory of .vol volumes")->required();
  pre_cmd->add_option("--out", pre.out, "Output directory")->required();
  pre_cmd->add_option("--strategy", pre.strategy, "Student masking strategy")
      ->check(CLI::IsMember({"attention", "random", "blockwise", "low-attention"}));
  pre_cmd->add_flag("--no-noisy-teacher", pre.no_noisy_teacher, "Teacher sees clean views");
  pre_cmd->add_option("--steps", pre.steps, "Overrides the config's step count")->check(CLI::NonNegativeNumber);
  pre_cmd->add_option("--seed", pre.seed, "Overrides the config's seed")->check(CLI::NonNegativeNumber);

  ProbeArgs probe;
  auto add_probe = [&](CLI::App* c, bool with_mode) {
    c->add_option("--ckpt", probe.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    c->add_option("--data", probe.data, "Directory of .vol volumes")->required();
    c->add_option("--labels", probe.labels, "labels.csv (default: <data>/labels.csv)");
    c->add_option("--out", probe.out, "Output directory")->required();
    if (with_mode) c->add_option("--mode", probe.mode, "lp or ft")->check(CLI::IsMember({"lp", "ft"}));
    c->add_option("--train-frac", probe.train_frac, "Fraction of each class's training pool")
        ->check(CLI::Range(0.0, 1.0));
    c->add_option("--test-frac", probe.test_frac, "Held-out fraction per class")->check(CLI::Range(0.0, 1.0));
    c->add_option("--epochs", probe.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
    c->add_option("--seed", probe.seed, "Split and initialisation seed");
  };
  auto* probe_cmd = app.add_subcommand("probe", "Linear probe or fine-tune on labelled volumes");
  add_probe(probe_cmd, true);
  auto* ft_cmd = app.add_subcommand("finetune", "Fine-tune every layer on labelled volumes");
  add_probe(ft_cmd, false);

  DiagArgs diag;
  auto add_diag = [&](CLI::App* c, bool labels) {
    c->add_option("--ckpt", diag.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    c->add_option("--data", diag.data, "A .vol file or a directory of them")->required();
    c->add_option("--out", diag.out, "Output directory")->required();
    if (labels)
      c->add_option("--labels", diag.labels, "labels.csv (default: <data>/labels.csv)");
    else
      c->add_option("--limit", diag.limit, "Use at most this many volumes")->check(CLI::NonNegativeNumber);
  };
  auto* ent_cmd = app.add_subcommand("attn-entropy", "Attention-distance entropy per stage, layer and head");
  add_diag(ent_cmd, false);
  ent_cmd->add_option("--bins", diag.bins, "Histogram bins")->check(CLI::Range(2, 1 << 16));
  auto* map_cmd = app.add_subcommand("attn-map", "Export semantic-attention maps as .vol");
  add_diag(map_cmd, false);
  auto* cl_cmd = app.add_subcommand("cluster", "Inter/intra-class distances of pooled features");
  add_diag(cl_cmd, true);

  std::string show_path;
  auto* show_cmd = app.add_subcommand("show-config", "Print a config with every default filled in");
  show_cmd->add_option("--config", show_path, "PretrainConfig JSON file")->check(CLI::ExistingFile);

  std::string replay_path, replay_out;
  auto* replay_cmd = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  replay_cmd->add_option("--manifest", replay_path, "manifest.json")->required()->check(CLI::ExistingFile);
  replay_cmd->add_option("--out", replay_out, "Redirect the output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (deterministic_mode()) Eigen::setNbThreads(1);
  Manifest m;
  for (int i = 0; i < argc; ++i) m.argv.emplace_back(argv[i]);
  try {
    fs::path out_dir;
    if (*gen_cmd) {
      m.command = "gen-data";
      cmd_gen_data(gen, m);
      out_dir = gen.out;
    } else if (*pre_cmd) {
      m.command = "pretrain";
      cmd_pretrain(pre, m);
      out_dir = pre.out;
    } else if (*probe_cmd || *ft_cmd) {
      m.command = bool(*ft_cmd) ? "finetune" : "probe";
      cmd_probe(probe, m, bool(*ft_cmd));
      out_dir = probe.out;
    } else if (*ent_cmd) {
      m.command = "attn-entropy";
      cmd_attn_entropy(diag, m);
      out_dir = diag.out;
    } else if (*map_cmd) {
      m.command = "attn-map";
      cmd_attn_map(diag, m);
      out_dir = diag.out;
    } else if (*cl_cmd) {
      m.command = "cluster";
      cmd_cluster(diag, m);
      out_dir = diag.out;
    } else if (*show_cmd) {
      cmd_show_config(show_path);
      return kOk;
    } else if (*replay_cmd) {
      return replay(replay_path, replay_out);
    }
    m.write(out_dir);
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return kValidation;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
