#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "badcrnn/dataset.hpp"
#include "badcrnn/errors.hpp"
#include "badcrnn/eval.hpp"
#include "badcrnn/features.hpp"
#include "badcrnn/io.hpp"
#include "badcrnn/net.hpp"
#include "badcrnn/parallel.hpp"
#include "badcrnn/random.hpp"
#include "badcrnn/train.hpp"

namespace badcrnn::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated integer list, got '" + text + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty integer list");
  return out;
}

std::vector<double> parse_real_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated number list, got '" + text + "'");
    }
  }
  return out;
}

// Flags that override entries of the resolved configuration. Each one is
// only applied when given on the command line.
class Overrides {
 public:
  template <class T>
  void bind(CLI::App* app, const std::string& flag, const std::string& section, const std::string& key,
            const std::string& help) {
    auto value = std::make_shared<std::optional<T>>();
    app->add_option(flag, *value, help);
    apply_.push_back([value, section, key](json& j) {
      if (*value) j[section][key] = **value;
    });
  }

  // Comma-separated list flag converted by `parse` before it is stored.
  template <class Parse>
  void bind_list(CLI::App* app, const std::string& flag, const std::string& section, const std::string& key,
                 const std::string& help, Parse parse) {
    auto value = std::make_shared<std::optional<std::string>>();
    app->add_option(flag, *value, help);
    apply_.push_back([value, section, key, parse](json& j) {
      if (*value) j[section][key] = parse(**value);
    });
  }

  void apply(json& j) const {
    for (const auto& f : apply_) f(j);
  }

 private:
  std::vector<std::function<void(json&)>> apply_;
};

// ---------------------------------------------------------------------------
// Config sections

json synth_defaults() {
  const SynthSpec s;
  return {{"n_clips", 10},
          {"positive_fraction", 0.5},
          {"duration_s", s.duration_s},
          {"sample_rate", s.sample_rate},
          {"min_chirps", s.n_chirps.first},
          {"max_chirps", s.n_chirps.second},
          {"chirp_min_hz", s.chirp_band.first},
          {"chirp_max_hz", s.chirp_band.second},
          {"noise_level", s.noise_level},
          {"distractor_level", s.distractor_level},
          {"encoding", "pcm16"}};
}

json feature_defaults() {
  const FeatureConfig c;
  return {{"frame_ms", c.frame_ms},       {"overlap_fraction", c.overlap_fraction},
          {"n_mels", c.n_mels},           {"fft_size", c.fft_size},
          {"fmin", c.fmin},               {"fmax", c.fmax},
          {"log_epsilon", c.log_epsilon}, {"normalize", true}};
}

FeatureConfig feature_config(const json& j) {
  FeatureConfig c;
  c.frame_ms = j.at("frame_ms").get<double>();
  c.overlap_fraction = j.at("overlap_fraction").get<double>();
  c.n_mels = j.at("n_mels").get<int>();
  c.fft_size = j.at("fft_size").get<int>();
  c.fmin = j.at("fmin").get<double>();
  c.fmax = j.at("fmax").get<double>();
  c.log_epsilon = j.at("log_epsilon").get<double>();
  return c;
}

json model_defaults() {
  json j = json::parse(config_to_json(ModelConfig{}));
  j["n_recurrent_units"] = 0;
  j.erase("seed");
  return j;
}

json train_defaults() {
  json j = json::parse(train_config_to_json(TrainConfig{}));
  j.erase("seed");
  return j;
}

json grid_defaults() {
  const auto space = GridSpace::standard();
  return {{"feature_maps", space.feature_maps},
          {"recurrent_layers", space.recurrent_layers},
          {"pooling", space.pooling}};
}

ModelConfig model_config(const json& resolved) {
  json j = resolved.at("model");
  j["seed"] = resolved.at("seed");
  return config_from_json(j.dump());
}

TrainConfig train_config(const json& resolved, int jobs) {
  json j = resolved.at("train");
  j["seed"] = resolved.at("seed");
  TrainConfig c = train_config_from_json(j.dump());
  c.jobs = jobs;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Run context

struct Context {
  std::string command;
  std::vector<std::string> argv;
  json resolved;
  fs::path out;
  int jobs = 1;
  json inputs = json::object();
  std::ostream* log = nullptr;

  std::uint64_t seed() const { return resolved.at("seed").get<std::uint64_t>(); }

  void record(const std::string& name, const fs::path& path) {
    inputs[name] = io::file_fingerprint(path);
  }

  // One fingerprint over many files, keyed by their names.
  void record_all(const std::string& name, const std::vector<fs::path>& paths) {
    std::string listing;
    for (const auto& p : paths) listing += p.filename().string() + " " + io::file_fingerprint(p) + "\n";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(io::fnv1a(listing)));
    inputs[name] = {{"files", paths.size()}, {"fingerprint", std::string("fnv1a64:") + buf}};
  }

  void write_manifest() const {
    json m;
    m["command"] = command;
    m["argv"] = argv;
    m["config"] = resolved;
    m["inputs"] = inputs;
    m["seed"] = seed();
    m["version"] = BADCRNN_VERSION;
    io::write_atomic(out / "run_manifest.json", m.dump(2) + "\n");
  }
};

struct Inputs {
  std::optional<fs::path> manifest;
  std::optional<fs::path> features;
  std::optional<fs::path> split;
  std::vector<fs::path> models;
  std::vector<fs::path> predictions;
  std::optional<fs::path> input;
  std::string subset = "test";
};

struct LabeledSplit {
  Manifest manifest;
  SplitAssignment assignment;
};

// Labels plus the train/val/test assignment, either from a split file or a
// fresh 80/20 train/validation split of the manifest.
LabeledSplit load_split(Context& ctx, const Inputs& in) {
  if (!in.manifest) throw ConfigError("--manifest is required");
  LabeledSplit out{load_manifest(*in.manifest), {}};
  ctx.record("manifest", *in.manifest);
  const int index = ctx.resolved.at("data").at("split_index").get<int>();
  if (in.split) {
    ctx.record("split", *in.split);
    const auto file = splits_from_json(io::read_text(*in.split));
    if (index < 0 || static_cast<std::size_t>(index) >= file.splits.size()) {
      throw ConfigError("split index " + std::to_string(index) + " out of range");
    }
    out.assignment = file.splits[static_cast<std::size_t>(index)];
  } else {
    out.assignment = make_splits(out.manifest, {0.8, 0.2, 0.0}, 1, ctx.seed()).front();
  }
  return out;
}

fs::path feature_path(const fs::path& dir, const std::string& id) { return dir / (id + ".badf"); }

Dataset load_dataset(const fs::path& dir, const std::vector<std::string>& ids, const Manifest& manifest,
                     int jobs) {
  Dataset out(ids.size());
  parallel_for(ids.size(), jobs, [&](std::size_t i) {
    const auto* entry = manifest.find(ids[i]);
    if (entry == nullptr) throw JoinError("clip '" + ids[i] + "' is not in the manifest");
    out[i] = {load_features(feature_path(dir, ids[i])), entry->label};
  });
  return out;
}

std::vector<fs::path> dataset_paths(const fs::path& dir, std::vector<std::string> ids) {
  std::sort(ids.begin(), ids.end());
  std::vector<fs::path> out;
  for (const auto& id : ids) out.push_back(feature_path(dir, id));
  return out;
}

const std::vector<std::string>& subset_ids(const SplitAssignment& a, const std::string& subset) {
  if (subset == "train") return a.train;
  if (subset == "val") return a.validation;
  if (subset == "test") return a.test;
  throw ConfigError("--subset must be train, val, test or all");
}

// Feature files to score: a split subset when a split is given, otherwise
// every manifest clip, otherwise every .badf file in the directory.
std::vector<fs::path> scoring_paths(Context& ctx, const Inputs& in) {
  if (!in.features) throw ConfigError("--features is required");
  std::vector<std::string> ids;
  if (in.split) {
    const auto split = load_split(ctx, in);
    if (in.subset == "all") {
      for (const auto& e : split.manifest.entries) ids.push_back(e.clip_id);
    } else {
      ids = subset_ids(split.assignment, in.subset);
    }
  } else if (in.manifest) {
    ctx.record("manifest", *in.manifest);
    for (const auto& e : load_manifest(*in.manifest).entries) ids.push_back(e.clip_id);
  } else {
    for (const auto& entry : fs::directory_iterator(*in.features)) {
      if (entry.path().extension() == ".badf") ids.push_back(entry.path().stem().string());
    }
  }
  if (ids.empty()) throw ValidationError("no clips selected for scoring");
  auto paths = dataset_paths(*in.features, ids);
  ctx.record_all("features", paths);
  return paths;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_synth(Context& ctx, const Inputs&) {
  const json& s = ctx.resolved.at("synth");
  const int n = s.at("n_clips").get<int>();
  const double fraction = s.at("positive_fraction").get<double>();
  if (n < 1) throw ConfigError("n_clips must be at least 1");
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("positive_fraction must lie in [0, 1]");
  SynthSpec spec;
  spec.duration_s = s.at("duration_s").get<double>();
  spec.sample_rate = s.at("sample_rate").get<int>();
  spec.n_chirps = {s.at("min_chirps").get<int>(), s.at("max_chirps").get<int>()};
  spec.chirp_band = {s.at("chirp_min_hz").get<double>(), s.at("chirp_max_hz").get<double>()};
  spec.noise_level = s.at("noise_level").get<double>();
  spec.distractor_level = s.at("distractor_level").get<double>();
  validate(spec);
  const auto encoding_name = s.at("encoding").get<std::string>();
  if (encoding_name != "pcm16" && encoding_name != "float32") {
    throw ConfigError("encoding must be pcm16 or float32");
  }
  const auto encoding = encoding_name == "pcm16" ? WavEncoding::pcm16 : WavEncoding::float32;

  const auto n_pos = static_cast<std::size_t>(std::llround(fraction * n));
  std::vector<int> labels(static_cast<std::size_t>(n), 0);
  std::fill_n(labels.begin(), n_pos, 1);
  Rng::derive(ctx.seed(), 0).shuffle(std::span(labels));

  Manifest manifest;
  for (int i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "synth%05d", i);
    manifest.entries.push_back({id, labels[static_cast<std::size_t>(i)], ctx.out / (std::string(id) + ".wav")});
  }
  parallel_for(manifest.entries.size(), ctx.jobs, [&](std::size_t i) {
    SynthSpec clip_spec = spec;
    clip_spec.positive = manifest.entries[i].label == 1;
    const auto seed = Rng::derive(ctx.seed(), 1, i).next();
    write_wav(synth_clip(clip_spec, seed, manifest.entries[i].clip_id).first, manifest.entries[i].path,
              encoding);
  });
  save_manifest(manifest, ctx.out / "manifest.csv");
  *ctx.log << "wrote " << n << " clips (" << n_pos << " positive) to " << ctx.out.string() << "\n";
}

void cmd_split(Context& ctx, const Inputs& in) {
  if (!in.manifest) throw ConfigError("--manifest is required");
  const auto manifest = load_manifest(*in.manifest);
  ctx.record("manifest", *in.manifest);
  const auto ratios = ctx.resolved.at("split").at("ratios").get<std::vector<double>>();
  if (ratios.size() != 3) throw ConfigError("ratios need three values (train, val, test)");
  SplitFile file;
  file.seed = ctx.seed();
  file.ratios = {ratios[0], ratios[1], ratios[2]};
  file.splits = make_splits(manifest, file.ratios, ctx.resolved.at("split").at("n_splits").get<int>(), file.seed);
  io::write_atomic(ctx.out / "splits.json", splits_to_json(file));
  *ctx.log << "wrote " << file.splits.size() << " splits\n";
}

void cmd_features(Context& ctx, const Inputs& in) {
  if (!in.manifest) throw ConfigError("--manifest is required");
  const auto manifest = load_manifest(*in.manifest);
  ctx.record("manifest", *in.manifest);
  const auto config = feature_config(ctx.resolved.at("features"));

  std::vector<FeatureMatrix> features(manifest.entries.size());
  std::vector<std::string> hashes(manifest.entries.size());
  parallel_for(manifest.entries.size(), ctx.jobs, [&](std::size_t i) {
    const auto& entry = manifest.entries[i];
    AudioClip clip;
    try {
      clip = decode_wav(entry.path);
      hashes[i] = io::file_fingerprint(entry.path);
    } catch (const IoError& e) {
      throw IoError("clip '" + entry.clip_id + "': " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("clip '" + entry.clip_id + "': " + e.what());
    }
    clip.id = entry.clip_id;
    features[i] = extract_features(clip, config);
  });
  std::string listing;
  for (std::size_t i = 0; i < hashes.size(); ++i) listing += manifest.entries[i].clip_id + " " + hashes[i] + "\n";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(io::fnv1a(listing)));
  ctx.inputs["audio"] = {{"files", hashes.size()}, {"fingerprint", std::string("fnv1a64:") + buf}};

  // Statistics come from the training clips of the chosen split, if any.
  std::vector<FeatureMatrix> fit_set;
  if (in.split) {
    const auto split = load_split(ctx, in);
    std::map<std::string, const FeatureMatrix*> by_id;
    for (const auto& fm : features) by_id[fm.clip_id] = &fm;
    for (const auto& id : split.assignment.train) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw JoinError("split clip '" + id + "' is not in the manifest");
      fit_set.push_back(*it->second);
    }
  } else {
    fit_set = features;
  }
  const auto stats = fit_norm_stats(fit_set);
  const bool normalise = ctx.resolved.at("features").at("normalize").get<bool>();
  parallel_for(features.size(), ctx.jobs, [&](std::size_t i) {
    save_features(normalise ? normalize(features[i], stats) : features[i],
                  feature_path(ctx.out, features[i].clip_id));
  });
  io::write_atomic(ctx.out / "norm_stats.json", norm_stats_to_json(stats));
  *ctx.log << "wrote " << features.size() << " feature files\n";
}

void cmd_train(Context& ctx, const Inputs& in) {
  if (!in.features) throw ConfigError("--features is required");
  const auto split = load_split(ctx, in);
  const auto model_cfg = model_config(ctx.resolved);
  const auto train_cfg = train_config(ctx.resolved, ctx.jobs);
  ctx.record_all("features", dataset_paths(*in.features, split.assignment.train));
  const auto train_set = load_dataset(*in.features, split.assignment.train, split.manifest, ctx.jobs);
  const auto val_set = load_dataset(*in.features, split.assignment.validation, split.manifest, ctx.jobs);

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    *ctx.log << "epoch " << r.epoch << " loss " << io::format_g9(r.train_loss) << " val_auc "
             << io::format_g9(r.val_auc) << "\n";
  };
  const auto run = train(train_cfg, model_cfg, train_set, val_set, hooks);
  save_model(run.best_model, ctx.out / "model.badc");
  io::write_atomic(ctx.out / "history.csv", history_to_csv(run));
  io::write_atomic(ctx.out / "train_run.json", run_summary_json(run, train_cfg));
  *ctx.log << "best epoch " << run.best_epoch << " val_auc " << io::format_g9(run.best_val_auc) << "\n";
}

void cmd_gridsearch(Context& ctx, const Inputs& in) {
  if (!in.features) throw ConfigError("--features is required");
  const auto split = load_split(ctx, in);
  const auto base = model_config(ctx.resolved);
  const auto train_cfg = train_config(ctx.resolved, ctx.jobs);
  const json& g = ctx.resolved.at("grid");
  const GridSpace space{g.at("feature_maps").get<std::vector<int>>(),
                        g.at("recurrent_layers").get<std::vector<int>>(),
                        g.at("pooling").get<std::vector<std::vector<int>>>()};
  ctx.record_all("features", dataset_paths(*in.features, split.assignment.train));
  const auto train_set = load_dataset(*in.features, split.assignment.train, split.manifest, ctx.jobs);
  const auto val_set = load_dataset(*in.features, split.assignment.validation, split.manifest, ctx.jobs);
  const auto report = run_grid(space, base, train_cfg, train_set, val_set);
  io::write_atomic(ctx.out / "grid_report.csv", grid_report_to_csv(report));
  *ctx.log << "evaluated " << report.size() << " configurations\n";
}

std::vector<Prediction> score(Context& ctx, const Inputs& in, const std::vector<fs::path>& paths) {
  if (in.models.empty()) throw ConfigError("at least one --model is required");
  std::vector<FeatureMatrix> features(paths.size());
  parallel_for(paths.size(), ctx.jobs, [&](std::size_t i) { features[i] = load_features(paths[i]); });
  std::vector<std::vector<Prediction>> sets;
  for (std::size_t m = 0; m < in.models.size(); ++m) {
    ctx.record("model" + std::to_string(m), in.models[m]);
    sets.push_back(predict_all(load_model(in.models[m]), features, ctx.jobs));
  }
  return ensemble_average(sets);
}

void cmd_predict(Context& ctx, const Inputs& in) {
  const auto predictions = score(ctx, in, scoring_paths(ctx, in));
  io::write_atomic(ctx.out / "predictions.csv", predictions_to_csv(predictions));
  *ctx.log << "scored " << predictions.size() << " clips\n";
}

void write_report(Context& ctx, const std::vector<Prediction>& predictions, const Manifest& manifest) {
  const auto report = auc(predictions, labels_from(manifest));
  io::write_atomic(ctx.out / "report.json", report_to_json(report));
  *ctx.log << "auc " << io::format_g9(report.auc) << " (" << report.n_pos << " positive, " << report.n_neg
           << " negative)\n";
}

void cmd_evaluate(Context& ctx, const Inputs& in) {
  if (!in.manifest) throw ConfigError("--manifest is required");
  std::vector<Prediction> predictions;
  if (!in.predictions.empty()) {
    if (in.predictions.size() != 1 || !in.models.empty()) {
      throw ConfigError("evaluate takes one --predictions file or models with --features");
    }
    ctx.record("predictions", in.predictions.front());
    predictions = predictions_from_csv(io::read_text(in.predictions.front()));
  } else {
    predictions = score(ctx, in, scoring_paths(ctx, in));
    io::write_atomic(ctx.out / "predictions.csv", predictions_to_csv(predictions));
  }
  ctx.record("manifest", *in.manifest);
  write_report(ctx, predictions, load_manifest(*in.manifest));
}

void cmd_ensemble(Context& ctx, const Inputs& in) {
  if (in.predictions.empty()) throw ConfigError("at least one --predictions file is required");
  std::vector<std::vector<Prediction>> sets;
  for (std::size_t i = 0; i < in.predictions.size(); ++i) {
    ctx.record("predictions" + std::to_string(i), in.predictions[i]);
    sets.push_back(predictions_from_csv(io::read_text(in.predictions[i])));
  }
  const auto merged = ensemble_average(sets);
  io::write_atomic(ctx.out / "predictions.csv", predictions_to_csv(merged));
  *ctx.log << "averaged " << sets.size() << " prediction sets over " << merged.size() << " clips\n";
  if (in.manifest) {
    ctx.record("manifest", *in.manifest);
    write_report(ctx, merged, load_manifest(*in.manifest));
  }
}

void cmd_activations(Context& ctx, const Inputs& in) {
  if (in.models.size() != 1 || !in.input) throw ConfigError("activations needs one --model and --input");
  ctx.record("model", in.models.front());
  ctx.record("input", *in.input);
  const json& a = ctx.resolved.at("activations");
  const auto map = export_activations(load_model(in.models.front()), load_features(*in.input),
                                      a.at("layer").get<std::size_t>(), a.at("filter").get<std::size_t>());
  io::write_atomic(ctx.out / "activations.csv", activations_to_csv(map));
}

// ---------------------------------------------------------------------------

struct Command {
  CLI::App* app = nullptr;
  json defaults;
  Overrides overrides;
  std::function<void(Context&, const Inputs&)> action;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> config;
  fs::path out;
  int jobs = 1;
};

void add_model_flags(Command& c) {
  c.overrides.bind<int>(c.app, "--maps", "model", "n_feature_maps", "Convolutional feature maps (and GRU width)");
  c.overrides.bind_list(c.app, "--pooling", "model", "conv_pooling", "Frequency pool sizes, e.g. 5,4,2",
                        parse_int_list);
  c.overrides.bind<int>(c.app, "--recurrent-layers", "model", "n_recurrent_layers", "Recurrent layers");
  c.overrides.bind<std::string>(c.app, "--recurrent-type", "model", "recurrent_type", "gru or feedforward");
  c.overrides.bind<int>(c.app, "--recurrent-units", "model", "n_recurrent_units",
                        "Recurrent width; 0 ties it to --maps");
  c.overrides.bind<double>(c.app, "--dropout", "model", "dropout_rate", "Dropout rate");
  c.overrides.bind<int>(c.app, "--n-mels", "model", "n_mels", "Input mel bands");
  c.overrides.bind<double>(c.app, "--lr", "train", "learning_rate", "Adam learning rate");
  c.overrides.bind<int>(c.app, "--batch-size", "train", "batch_size", "Clips per minibatch");
  c.overrides.bind<int>(c.app, "--max-epochs", "train", "max_epochs", "Epoch limit");
  c.overrides.bind<int>(c.app, "--patience", "train", "patience", "Epochs without improvement before stopping");
  c.overrides.bind<int>(c.app, "--split-index", "data", "split_index", "Which split of --split to use");
}

void add_data_inputs(CLI::App* app, Inputs& in) {
  app->add_option("--manifest", in.manifest, "itemid,hasbird CSV")->check(CLI::ExistingFile);
  app->add_option("--features", in.features, "Directory of .badf files")->check(CLI::ExistingDirectory);
  app->add_option("--split", in.split, "Split JSON file")->check(CLI::ExistingFile);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return kExitNumeric;
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return kExitUsage;
  return kExitData;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bird audio detection with convolutional recurrent networks", "badcrnn"};
  app.require_subcommand(1);
  app.set_version_flag("--version", BADCRNN_VERSION);

  Inputs in;
  std::map<std::string, std::unique_ptr<Command>> commands;
  auto add = [&](const std::string& name, const std::string& help, json defaults,
                 std::function<void(Context&, const Inputs&)> action) -> Command& {
    auto c = std::make_unique<Command>();
    c->app = app.add_subcommand(name, help);
    c->defaults = std::move(defaults);
    c->defaults["seed"] = 0;
    c->action = std::move(action);
    c->app->add_option("--seed", c->seed, "Seed for every random stream");
    c->app->add_option("--config", c->config, "JSON file with configuration sections")
        ->check(CLI::ExistingFile);
    c->app->add_option("--out", c->out, "Output directory")->required();
    c->app->add_option("--jobs", c->jobs, "Worker threads")->check(CLI::PositiveNumber);
    auto& ref = *c;
    commands[name] = std::move(c);
    return ref;
  };

  {
    auto& c = add("synth", "Write synthetic labelled WAV clips and a manifest", {{"synth", synth_defaults()}},
                  cmd_synth);
    c.overrides.bind<int>(c.app, "--n-clips", "synth", "n_clips", "Number of clips");
    c.overrides.bind<double>(c.app, "--positive-fraction", "synth", "positive_fraction", "Share of positives");
    c.overrides.bind<double>(c.app, "--duration", "synth", "duration_s", "Clip length in seconds");
    c.overrides.bind<int>(c.app, "--sample-rate", "synth", "sample_rate", "Sample rate in Hz");
    c.overrides.bind<int>(c.app, "--min-chirps", "synth", "min_chirps", "Fewest chirps per positive");
    c.overrides.bind<int>(c.app, "--max-chirps", "synth", "max_chirps", "Most chirps per positive");
    c.overrides.bind<double>(c.app, "--chirp-min-hz", "synth", "chirp_min_hz", "Lower chirp frequency");
    c.overrides.bind<double>(c.app, "--chirp-max-hz", "synth", "chirp_max_hz", "Upper chirp frequency");
    c.overrides.bind<double>(c.app, "--noise-level", "synth", "noise_level", "Gaussian noise scale");
    c.overrides.bind<double>(c.app, "--distractor-level", "synth", "distractor_level",
                             "Low-frequency tone amplitude");
    c.overrides.bind<std::string>(c.app, "--encoding", "synth", "encoding", "pcm16 or float32");
  }
  {
    auto& c = add("split", "Write stratified train/val/test splits",
                  {{"split", {{"ratios", {0.6, 0.2, 0.2}}, {"n_splits", 5}}}}, cmd_split);
    c.app->add_option("--manifest", in.manifest, "itemid,hasbird CSV")->check(CLI::ExistingFile)->required();
    c.overrides.bind_list(c.app, "--ratios", "split", "ratios", "train,val,test fractions", parse_real_list);
    c.overrides.bind<int>(c.app, "--n-splits", "split", "n_splits", "Number of independent splits");
  }
  {
    auto& c = add("features", "Extract normalised log mel-band energies",
                  {{"features", feature_defaults()}, {"data", {{"split_index", 0}}}}, cmd_features);
    c.app->add_option("--manifest", in.manifest, "itemid,hasbird CSV")->check(CLI::ExistingFile)->required();
    c.app->add_option("--split", in.split, "Fit normalisation on this split's training clips")
        ->check(CLI::ExistingFile);
    c.overrides.bind<int>(c.app, "--split-index", "data", "split_index", "Which split of --split to use");
    c.overrides.bind<double>(c.app, "--frame-ms", "features", "frame_ms", "Frame length in ms");
    c.overrides.bind<double>(c.app, "--overlap", "features", "overlap_fraction", "Frame overlap fraction");
    c.overrides.bind<int>(c.app, "--n-mels", "features", "n_mels", "Mel bands");
    c.overrides.bind<int>(c.app, "--fft-size", "features", "fft_size", "FFT length");
    c.overrides.bind<double>(c.app, "--fmin", "features", "fmin", "Lowest filterbank frequency");
    c.overrides.bind<double>(c.app, "--fmax", "features", "fmax", "Highest filterbank frequency; -1 is Nyquist");
    c.overrides.bind<bool>(c.app, "--normalize", "features", "normalize", "Write z-scored features");
  }
  {
    auto& c = add("train", "Train one model with early stopping",
                  {{"model", model_defaults()}, {"train", train_defaults()}, {"data", {{"split_index", 0}}}},
                  cmd_train);
    add_data_inputs(c.app, in);
    add_model_flags(c);
  }
  {
    auto& c = add("gridsearch", "Train every configuration of a hyperparameter grid",
                  {{"model", model_defaults()},
                   {"train", train_defaults()},
                   {"grid", grid_defaults()},
                   {"data", {{"split_index", 0}}}},
                  cmd_gridsearch);
    add_data_inputs(c.app, in);
    add_model_flags(c);
    c.overrides.bind_list(c.app, "--grid-maps", "grid", "feature_maps", "Feature-map choices", parse_int_list);
    c.overrides.bind_list(c.app, "--grid-layers", "grid", "recurrent_layers", "Recurrent-layer choices",
                          parse_int_list);
    c.overrides.bind_list(c.app, "--grid-pooling", "grid", "pooling",
                          "Pooling arrangements separated by ';', e.g. '4;2,2;5,4,2'",
                          [](const std::string& text) {
                            std::vector<std::vector<int>> out;
                            std::stringstream ss(text);
                            std::string item;
                            while (std::getline(ss, item, ';')) out.push_back(parse_int_list(item));
                            return out;
                          });
  }
  {
    auto& c = add("predict", "Score clips with one model or an averaged set of models",
                  {{"data", {{"split_index", 0}}}}, cmd_predict);
    add_data_inputs(c.app, in);
    c.app->add_option("--model", in.models, "Model file (repeat to average)")->check(CLI::ExistingFile)->required();
    c.app->add_option("--subset", in.subset, "train, val, test or all (with --split)");
    c.overrides.bind<int>(c.app, "--split-index", "data", "split_index", "Which split of --split to use");
  }
  {
    auto& c = add("evaluate", "Compute AUC and ROC for predictions or models",
                  {{"data", {{"split_index", 0}}}}, cmd_evaluate);
    add_data_inputs(c.app, in);
    c.app->add_option("--model", in.models, "Model file (repeat to average)")->check(CLI::ExistingFile);
    c.app->add_option("--predictions", in.predictions, "Predictions CSV")->check(CLI::ExistingFile);
    c.app->add_option("--subset", in.subset, "train, val, test or all (with --split)");
    c.overrides.bind<int>(c.app, "--split-index", "data", "split_index", "Which split of --split to use");
  }
  {
    auto& c = add("ensemble", "Average several prediction files", {}, cmd_ensemble);
    c.app->add_option("--predictions", in.predictions, "Predictions CSV (repeat)")
        ->check(CLI::ExistingFile)
        ->required();
    c.app->add_option("--manifest", in.manifest, "Labels for an AUC report")->check(CLI::ExistingFile);
  }
  {
    auto& c = add("activations", "Export one filter's activation map for a clip",
                  {{"activations", {{"layer", 0}, {"filter", 0}}}}, cmd_activations);
    c.app->add_option("--model", in.models, "Model file")->check(CLI::ExistingFile)->required();
    c.app->add_option("--input", in.input, "Feature file")->check(CLI::ExistingFile)->required();
    c.overrides.bind<int>(c.app, "--layer", "activations", "layer", "Convolutional layer (0-based)");
    c.overrides.bind<int>(c.app, "--filter", "activations", "filter", "Filter within the layer (0-based)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  for (auto& [name, command] : commands) {
    if (!command->app->parsed()) continue;
    Context ctx;
    ctx.command = name;
    ctx.argv.assign(argv + 1, argv + argc);
    ctx.out = command->out;
    ctx.jobs = command->jobs;
    ctx.log = &out;
    try {
      ctx.resolved = command->defaults;
      if (command->config) {
        json file;
        try {
          file = json::parse(io::read_text(*command->config));
        } catch (const json::exception& e) {
          throw FormatError(std::string("config: ") + e.what());
        }
        if (!file.is_object()) throw FormatError("config: expected a JSON object");
        ctx.record("config", *command->config);
        // Only sections this command understands are merged.
        for (auto& [key, value] : file.items()) {
          if (ctx.resolved.contains(key)) ctx.resolved[key].merge_patch(value);
        }
      }
      command->overrides.apply(ctx.resolved);
      if (command->seed) ctx.resolved["seed"] = *command->seed;
      fs::create_directories(ctx.out);
      command->action(ctx, in);
      ctx.write_manifest();
      return kExitOk;
    } catch (const json::exception& e) {
      err << "badcrnn " << name << ": invalid configuration: " << e.what() << "\n";
      return kExitUsage;
    } catch (const std::invalid_argument& e) {
      err << "badcrnn " << name << ": " << e.what() << "\n";
      return kExitUsage;
    } catch (const std::exception& e) {
      err << "badcrnn " << name << ": " << e.what() << "\n";
      return exit_code_for(e);
    }
  }
  return kExitUsage;
}

}  // namespace badcrnn::cli
