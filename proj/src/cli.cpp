#include "vitmae/cli.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>

#include "CLI11.hpp"
#include "vitmae/checkpoint.hpp"
#include "vitmae/data.hpp"
#include "vitmae/errors.hpp"
#include "vitmae/image_io.hpp"
#include "vitmae/log.hpp"
#include "vitmae/mae.hpp"

namespace vitmae {

namespace fs = std::filesystem;

namespace {

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  return out;
}

void prepare_run_dir(const RunConfig& config) {
  std::error_code ec;
  fs::create_directories(config.out, ec);
  if (ec) throw DataError("cannot create output directory '" + config.out.string() + "': " + ec.message());
  open_output(config.out / "config.ini") << config.to_text();
}

class MetricLog {
 public:
  explicit MetricLog(const fs::path& dir) : log_(open_output(dir / "metrics.log")) {}

  void line(const std::string& text) {
    log_ << text << '\n';
    log_.flush();
  }

 private:
  std::ofstream log_;
};

class EpochTable {
 public:
  EpochTable(const fs::path& dir, MetricLog& log, std::ostream& out, std::size_t total)
      : csv_(open_output(dir / "metrics.csv")), log_(log), out_(out), total_(total) {
    csv_ << "phase,epoch,loss,val_mse,lr\n";
  }

  void operator()(const MetricRecord& r) {
    const std::string phase = phase_name(r.phase);
    csv_ << phase << ',' << r.epoch << ',' << fmt("%.9g", r.loss) << ',' << fmt("%.9g", r.val_mse) << ','
         << fmt("%.9g", r.lr) << '\n';
    csv_.flush();
    std::string text = phase + " epoch " + std::to_string(r.epoch) + "/" + std::to_string(total_) + " loss " +
                       fmt("%.6f", r.loss);
    if (r.phase == Phase::kFinetune) text += " val_mse " + fmt("%.6f", r.val_mse);
    text += " lr " + fmt("%.6g", r.lr);
    log_.line(text);
    out_ << text << '\n';
  }

 private:
  std::ofstream csv_;
  MetricLog& log_;
  std::ostream& out_;
  std::size_t total_;
};

struct Dataset {
  std::vector<LabeledSample> samples;
  SplitManifest split;

  std::vector<LabeledSample> subset(const std::string& name) const {
    std::vector<LabeledSample> out;
    for (auto i : split.named(name)) out.push_back(samples[i]);
    return out;
  }
};

Dataset load_data(const RunConfig& config) {
  Dataset d;
  if (config.synthetic > 0) {
    d.samples = synth_generate(config.synthetic, config.seed).samples;
  } else {
    if (config.data_root.empty()) throw ConfigError("no dataset: set data.root or pass --synthetic N");
    d.samples = load_dataset(config.data_root, config.manifest_path());
  }
  d.split = split_dataset(d.samples, config.seed);
  return d;
}

void write_split(const Dataset& d, const fs::path& path) {
  auto out = open_output(path);
  out << "image_path,led_id,tsc,split\n";
  for (const char* name : {"train", "val", "test"})
    for (auto i : d.split.named(name))
      out << d.samples[i].image_path << ',' << d.samples[i].led_id << ',' << d.samples[i].tsc << ',' << name << '\n';
}

struct NamedImage {
  std::string name;
  Tensor<float> image;
};

std::vector<NamedImage> resolve_inputs(const RunConfig& config) {
  std::vector<NamedImage> inputs;
  if (!config.images.empty()) {
    for (const auto& p : config.images) {
      auto image = raster_to_tensor(read_gray_image(p));
      if (image.shape() != Shape{kImageSide, kImageSide, 1}) {
        throw DataError("image '" + p + "' is " + shape_string(image.shape()) + ", expected 64×64 grayscale");
      }
      inputs.push_back({fs::path(p).stem().string(), std::move(image)});
    }
  } else {
    const auto data = load_data(config);
    const auto& indices = data.split.named(config.split);
    for (std::size_t k = 0; k < indices.size() && k < config.max_images; ++k) {
      const auto& s = data.samples[indices[k]];
      const std::string name = s.image_path.empty() ? s.led_id + "_t" + std::to_string(s.tsc)
                                                    : fs::path(s.image_path).stem().string();
      inputs.push_back({name, s.image});
    }
  }
  if (inputs.empty()) throw DataError("no input images");
  std::map<std::string, int> seen;
  for (auto& in : inputs) {
    const int n = seen[in.name]++;
    if (n > 0) in.name += "_" + std::to_string(n);
  }
  return inputs;
}

Checkpoint require_checkpoint(const RunConfig& config, const std::string& command) {
  if (config.from_checkpoint.empty()) throw ConfigError(command + " needs --from-checkpoint");
  return load_checkpoint(config.from_checkpoint);
}

/// Stores the checkpoint a command ran with inside its run directory and
/// points the echoed config at that copy.
void keep_checkpoint(RunConfig& config, const Checkpoint& checkpoint, const std::string& file = "model.maec") {
  const auto target = config.out / file;
  std::error_code ec;
  if (config.from_checkpoint.empty() || !fs::equivalent(config.from_checkpoint, target, ec)) {
    std::error_code mk;
    fs::create_directories(config.out, mk);
    save_checkpoint(checkpoint, target);
  }
  config.from_checkpoint = fs::absolute(target);
}

void require_kind(const Checkpoint& checkpoint, const std::string& kind, const std::string& command) {
  const auto actual = checkpoint_kind(checkpoint);
  if (actual != kind) {
    throw ContractError(command + " needs a " + kind + " checkpoint, got '" + actual + "'");
  }
}

template <typename T>
void pretrain_impl(const RunConfig& config, std::ostream& out) {
  prepare_run_dir(config);
  const auto data = load_data(config);
  write_split(data, config.out / "split.csv");
  std::vector<Tensor<float>> images;
  for (auto i : data.split.train) images.push_back(data.samples[i].image);
  MetricLog log(config.out);
  log.line("pretrain images " + std::to_string(images.size()) + " model " + config.model.name + " seed " +
           std::to_string(config.seed));
  EpochTable table(config.out, log, out, config.pretrain.epochs);
  auto run = pretrain<T>(images, config.model, config.pretrain, std::ref(table));
  run.checkpoint.metadata["run_config"] = config.to_text();
  save_checkpoint(run.checkpoint, config.out / "pretrain.maec");
  log.line("checkpoint pretrain.maec");
  out << "checkpoint " << (config.out / "pretrain.maec").string() << '\n';
}

template <typename T>
void finetune_impl(RunConfig config, std::ostream& out) {
  Checkpoint init;
  const bool from_checkpoint = !config.from_checkpoint.empty();
  if (from_checkpoint) {
    init = load_checkpoint(config.from_checkpoint);
    config.model = checkpoint_model_config(init);
    log_info("finetune initialized from " + config.from_checkpoint.string());
    keep_checkpoint(config, init, "init.maec");
  }
  prepare_run_dir(config);
  const auto data = load_data(config);
  write_split(data, config.out / "split.csv");
  const auto train = data.subset("train");
  const auto val = data.subset("val");
  MetricLog log(config.out);
  log.line(std::string("finetune ") + (from_checkpoint ? "from init.maec" : "from scratch") +
           " train " + std::to_string(train.size()) + " val " + std::to_string(val.size()));
  EpochTable table(config.out, log, out, config.finetune.epochs);
  auto run = finetune<T>(train, val, config.model, config.finetune, from_checkpoint ? &init : nullptr,
                         std::ref(table));
  run.checkpoint.metadata["run_config"] = config.to_text();
  save_checkpoint(run.checkpoint, config.out / "finetune.maec");
  const std::string summary = "best epoch " + std::to_string(run.best_epoch) + " val_mse " +
                              fmt("%.9g", run.best_val_mse);
  log.line(summary);
  log.line("checkpoint finetune.maec");
  out << summary << '\n' << "checkpoint " << (config.out / "finetune.maec").string() << '\n';
}

template <typename T>
void eval_impl(RunConfig config, std::ostream& out) {
  VitRegressor<T> model;
  Checkpoint ck;
  if (!config.from_checkpoint.empty()) {
    ck = load_checkpoint(config.from_checkpoint);
    require_kind(ck, "regressor", "eval");
    config.model = checkpoint_model_config(ck);
    model = load_regressor<T>(ck);
  } else {
    log_warning("eval without --from-checkpoint: evaluating a freshly initialized model");
    model = VitRegressor<T>::init(config.model, config.seed);
    ck.metadata["kind"] = "regressor";
    ck.metadata["model"] = model_config_to_json(config.model);
    store_parameters(ck, model.parameters());
  }
  keep_checkpoint(config, ck);
  prepare_run_dir(config);
  const auto data = load_data(config);
  const auto samples = data.subset(config.split);
  if (samples.empty()) throw DataError("split '" + config.split + "' is empty");
  const auto report = evaluate(model, samples, config.split, kInferenceBatch, config.threads);

  auto predictions = open_output(config.out / "predictions.csv");
  predictions << "image_path,led_id,tsc,delta_b_max,prediction,label_class,predicted_class\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    predictions << samples[i].image_path << ',' << samples[i].led_id << ',' << samples[i].tsc << ','
                << fmt("%.9g", report.labels[i]) << ',' << fmt("%.9g", report.predictions[i]) << ','
                << defect_name(classify_defect(report.labels[i])) << ','
                << defect_name(classify_defect(report.predictions[i])) << '\n';
  }
  auto csv = open_output(config.out / "report.csv");
  csv << "split,n,mse,tp,fp,tn,fn\n"
      << report.split << ',' << samples.size() << ',' << fmt("%.9g", report.mse) << ',' << report.tp << ','
      << report.fp << ',' << report.tn << ',' << report.fn << '\n';

  char row[160];
  std::snprintf(row, sizeof row, "%-6s %6zu %12.6f %5zu %5zu %5zu %5zu", report.split.c_str(), samples.size(),
                report.mse, report.tp, report.fp, report.tn, report.fn);
  const std::string header = "split       n          mse    tp    fp    tn    fn";
  MetricLog log(config.out);
  log.line("eval " + config.from_checkpoint.string());
  log.line(header);
  log.line(row);
  out << header << '\n' << row << '\n';
}

template <typename T>
void reconstruct_impl(RunConfig config, std::ostream& out) {
  const auto ck = require_checkpoint(config, "reconstruct");
  const auto model = load_mae<T>(ck);
  config.model = model.config();
  keep_checkpoint(config, ck);
  prepare_run_dir(config);
  const auto inputs = resolve_inputs(config);
  const auto dir = config.out / "reconstruct";
  fs::create_directories(dir);
  const auto grid = PatchGrid::of(config.model);
  const std::size_t side = config.model.image_size;

  MetricLog log(config.out);
  auto table = open_output(config.out / "reconstruct.csv");
  table << "image,masked_patches,masked_mse,file\n";
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Rng rng(config.seed, "reconstruct", i);
    const auto plan = sample_mask(grid.count(), config.model.mask_ratio, rng);
    const auto original = cast<T>(inputs[i].image);
    const auto result = model.forward(patchify_batch<T, float>({inputs[i].image}, grid.patch_size), {plan});
    const Tensor<float> panels[3] = {inputs[i].image,
                                     cast<float>(masked_input_image(original, plan, grid.patch_size)),
                                     cast<float>(reconstruct_image(original, result.predicted, plan))};
    Raster triptych(3 * side, side, 1);
    for (std::size_t p = 0; p < 3; ++p) {
      const Raster r = tensor_to_raster(panels[p]);
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) triptych.at(p * side + x, y) = r.at(x, y);
    }
    const std::string file = inputs[i].name + ".png";
    write_image(dir / file, triptych);
    const double mse = static_cast<double>(result.loss.item());
    table << inputs[i].name << ',' << plan.masked.size() << ',' << fmt("%.9g", mse) << ",reconstruct/" << file
          << '\n';
    const std::string text = inputs[i].name + " masked " + std::to_string(plan.masked.size()) + " mse " +
                             fmt("%.6f", mse);
    log.line(text);
    out << text << '\n';
  }
}

template <typename T>
void gradcam_impl(RunConfig config, std::ostream& out) {
  const auto ck = require_checkpoint(config, "gradcam");
  require_kind(ck, "regressor", "gradcam");
  const auto model = load_regressor<T>(ck);
  config.model = checkpoint_model_config(ck);
  keep_checkpoint(config, ck);
  prepare_run_dir(config);
  const auto inputs = resolve_inputs(config);
  const auto dir = config.out / "gradcam";
  fs::create_directories(dir);

  GradcamOptions options;
  options.layer_tag = config.gradcam_layer;
  options.upsample = config.upsample;
  MetricLog log(config.out);
  auto table = open_output(config.out / "gradcam.tsv");
  const std::string header = "image\tdelta_b_max\tdefect";
  table << header << '\n';
  out << header << '\n';
  for (const auto& in : inputs) {
    const auto h = gradcam(model, in.image, options, in.name);
    export_overlay(in.image, h, dir / (in.name + ".png"), config.overlay_alpha);
    write_heatmap_text(h, dir / (in.name + "_heatmap.csv"));
    const std::string printed = fmt("%.6f", h.prediction);
    const std::string row = in.name + "\t" + printed + "\t" + defect_name(classify_defect(std::stod(printed)));
    table << row << '\n';
    out << row << '\n';
    log.line("gradcam " + in.name + " layer " + h.layer_tag + " prediction " + fmt("%.9g", h.prediction));
  }
}

}  // namespace

void cmd_pretrain(const RunConfig& config, std::ostream& out) {
  if (config.precision == "f64") pretrain_impl<double>(config, out);
  else pretrain_impl<float>(config, out);
}

void cmd_finetune(const RunConfig& config, std::ostream& out) {
  if (config.precision == "f64") finetune_impl<double>(config, out);
  else finetune_impl<float>(config, out);
}

void cmd_eval(const RunConfig& config, std::ostream& out) {
  if (config.precision == "f64") eval_impl<double>(config, out);
  else eval_impl<float>(config, out);
}

void cmd_reconstruct(const RunConfig& config, std::ostream& out) {
  if (config.precision == "f64") reconstruct_impl<double>(config, out);
  else reconstruct_impl<float>(config, out);
}

void cmd_gradcam(const RunConfig& config, std::ostream& out) {
  if (config.precision == "f64") gradcam_impl<double>(config, out);
  else gradcam_impl<float>(config, out);
}

void cmd_synth(const RunConfig& config, std::ostream& out) {
  if (config.synthetic == 0) throw ConfigError("synth needs --synthetic N");
  const auto corpus = synth_generate(config.synthetic, config.seed);
  prepare_run_dir(config);
  write_corpus(corpus, config.out);
  MetricLog log(config.out);
  const std::string text = "synth leds " + std::to_string(corpus.leds.size()) + " images " +
                           std::to_string(corpus.samples.size()) + " seed " + std::to_string(config.seed);
  log.line(text);
  out << text << '\n' << "manifest " << (config.out / "manifest.csv").string() << '\n';
}

namespace {

struct FlagSpec {
  std::string flag;
  std::string key;
  std::string help;
};

struct Subcommand {
  std::string name;
  std::string help;
  void (*run)(const RunConfig&, std::ostream&);
  std::vector<FlagSpec> flags;
};

std::vector<FlagSpec> common_flags() {
  return {{"--seed", "run.seed", "Run seed; every random stream derives from it"},
          {"--threads", "run.threads", "Worker cap for inference (1 = bit-exact reruns)"},
          {"--out", "run.out", "Output directory"},
          {"--from-checkpoint", "run.from_checkpoint", "Input checkpoint"},
          {"--model", "model.size", "Model size: ti, s or b"},
          {"--synthetic", "data.synthetic", "Use a generated corpus of N LEDs"},
          {"--precision", "run.precision", "f32 or f64"},
          {"--data-root", "data.root", "Dataset directory"},
          {"--manifest", "data.manifest", "Manifest CSV (relative to the data root)"}};
}

std::vector<FlagSpec> training_flags(const std::string& phase) {
  return {{"--epochs", phase + ".epochs", "Training epochs"},
          {"--batch-size", phase + ".batch_size", "Mini-batch size"},
          {"--lr", phase + ".learning_rate", "Base learning rate"},
          {"--weight-decay", phase + ".weight_decay", "AdamW weight decay"},
          {"--warmup-epochs", phase + ".warmup_epochs", "Linear warmup epochs"},
          {"--augment", phase + ".augment", "Training augmentation (true/false)"}};
}

std::vector<FlagSpec> input_flags() {
  return {{"--split", "data.split", "Dataset split: train, val or test"},
          {"--max-images", "data.max_images", "Images taken from the split"}};
}

std::vector<Subcommand> subcommands() {
  auto with = [](std::vector<FlagSpec> a, const std::vector<FlagSpec>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  return {
      {"pretrain", "MAE self pre-training", &cmd_pretrain, with(common_flags(), training_flags("pretrain"))},
      {"finetune", "Fine-tune a regressor (scratch without --from-checkpoint)", &cmd_finetune,
       with(common_flags(), training_flags("finetune"))},
      {"eval", "Evaluate a fine-tuned checkpoint on a split", &cmd_eval,
       with(common_flags(), {{"--split", "data.split", "Dataset split: train, val or test"}})},
      {"reconstruct", "Original / masked / reconstruction triptychs", &cmd_reconstruct,
       with(common_flags(), input_flags())},
      {"gradcam", "GradCAM overlays and predicted ΔB_max table", &cmd_gradcam,
       with(with(common_flags(), input_flags()), {{"--layer", "gradcam.layer", "Activation tag"},
                                                  {"--upsample", "gradcam.upsample", "bilinear or nearest"},
                                                  {"--alpha", "gradcam.alpha", "Overlay blend weight"}})},
      {"synth", "Write a synthetic corpus", &cmd_synth, common_flags()},
  };
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

int report(std::ostream& err, const char* kind, int code, const std::string& message) {
  err << "error: kind=" << kind << " exit=" << code << " message=\"" << one_line(message) << "\"\n";
  return code;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked-autoencoder vision transformers for solder-joint degradation", "vitmae"};
  app.require_subcommand(1);
  app.fallthrough(false);

  const auto specs = subcommands();
  struct State {
    std::string config_file;
    std::vector<std::string> sets;
    std::vector<std::string> images;
    bool freeze = false;
    bool quiet = false;
    std::vector<std::string> values;
  };
  std::vector<State> states(specs.size());
  std::vector<CLI::App*> apps;
  for (std::size_t s = 0; s < specs.size(); ++s) {
    auto* sub = app.add_subcommand(specs[s].name, specs[s].help);
    auto& st = states[s];
    st.values.resize(specs[s].flags.size());
    sub->add_option("--config", st.config_file, "Config file (key = value with [sections])");
    sub->add_option("--set", st.sets, "Override any key: section.key=value (repeatable)");
    sub->add_flag("--quiet", st.quiet, "Only warnings and errors on stderr");
    for (std::size_t f = 0; f < specs[s].flags.size(); ++f) {
      auto* opt = sub->add_option(specs[s].flags[f].flag, st.values[f], specs[s].flags[f].help);
      if (specs[s].flags[f].key == "model.size") opt->check(CLI::IsMember({"ti", "s", "b"}));
    }
    if (specs[s].name == "finetune") sub->add_flag("--freeze-encoder", st.freeze, "Train only the head");
    if (specs[s].name == "reconstruct" || specs[s].name == "gradcam") {
      sub->add_option("--images", st.images, "Explicit 64×64 grayscale inputs");
    }
    apps.push_back(sub);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    for (auto* sub : apps)
      if (sub->parsed()) {
        out << sub->help();
        return kExitOk;
      }
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return report(err, "usage", kExitUsage, e.what());
  }

  std::size_t chosen = 0;
  while (chosen < apps.size() && !apps[chosen]->parsed()) ++chosen;
  const auto& spec = specs[chosen];
  const auto& st = states[chosen];
  if (st.quiet) set_log_level(LogLevel::kWarning);

  try {
    std::vector<ConfigAssignment> assignments;
    if (!st.config_file.empty()) assignments = read_config_file(st.config_file);
    for (const auto& s : st.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
      assignments.push_back({s.substr(0, eq), s.substr(eq + 1), "--set"});
    }
    for (std::size_t f = 0; f < spec.flags.size(); ++f) {
      if (apps[chosen]->count(spec.flags[f].flag) > 0) {
        assignments.push_back({spec.flags[f].key, st.values[f], spec.flags[f].flag});
      }
    }
    if (st.freeze) assignments.push_back({"finetune.freeze_encoder", "true", "--freeze-encoder"});
    if (!st.images.empty()) {
      std::string joined;
      for (const auto& p : st.images) joined += (joined.empty() ? "" : ",") + p;
      assignments.push_back({"data.images", joined, "--images"});
    }
    const RunConfig config = RunConfig::resolve(assignments);
    spec.run(config, out);
    return kExitOk;
  } catch (const ConfigError& e) {
    return report(err, "config", kExitUsage, e.what());
  } catch (const ContractError& e) {
    return report(err, "usage", kExitUsage, e.what());
  } catch (const CheckpointError& e) {
    return report(err, "checkpoint", kExitData, e.what());
  } catch (const DataError& e) {
    return report(err, "data", kExitData, e.what());
  } catch (const DimensionError& e) {
    return report(err, "data", kExitData, e.what());
  } catch (const fs::filesystem_error& e) {
    return report(err, "data", kExitData, e.what());
  } catch (const NumericError& e) {
    return report(err, "numeric", kExitNumeric, e.what());
  } catch (const std::exception& e) {
    return report(err, "internal", kExitUsage, e.what());
  }
}

}  // namespace vitmae
