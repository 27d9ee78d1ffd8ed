#include "vitmae/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "vitmae/errors.hpp"

namespace vitmae {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::size_t parse_size(const std::string& v) { return static_cast<std::size_t>(parse_u64(v)); }

double parse_double(const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string format_bool(bool v) { return v ? "true" : "false"; }

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Member>
Field size_field(Member member) {
  return {[member](RunConfig& c, const std::string& v) { std::invoke(member, c) = parse_size(v); },
          [member](const RunConfig& c) { return std::to_string(std::invoke(member, c)); }};
}

template <typename Member>
Field double_field(Member member) {
  return {[member](RunConfig& c, const std::string& v) { std::invoke(member, c) = parse_double(v); },
          [member](const RunConfig& c) { return format_double(std::invoke(member, c)); }};
}

template <typename Member>
Field bool_field(Member member) {
  return {[member](RunConfig& c, const std::string& v) { std::invoke(member, c) = parse_bool(v); },
          [member](const RunConfig& c) { return format_bool(std::invoke(member, c)); }};
}

template <typename Member>
Field string_field(Member member) {
  return {[member](RunConfig& c, const std::string& v) { std::invoke(member, c) = v; },
          [member](const RunConfig& c) { return std::string(std::invoke(member, c)); }};
}

template <typename Member>
Field path_field(Member member) {
  return {[member](RunConfig& c, const std::string& v) { std::invoke(member, c) = v; },
          [member](const RunConfig& c) { return std::invoke(member, c).string(); }};
}

void add_phase_fields(std::vector<std::pair<std::string, Field>>& fields, const std::string& section,
                      TrainConfig RunConfig::*phase) {
  auto sub = [phase](auto member) {
    return [phase, member](auto& c) -> auto& { return (c.*phase).*member; };
  };
  fields.emplace_back(section + ".epochs", size_field(sub(&TrainConfig::epochs)));
  fields.emplace_back(section + ".batch_size", size_field(sub(&TrainConfig::batch_size)));
  fields.emplace_back(section + ".learning_rate", double_field(sub(&TrainConfig::base_learning_rate)));
  fields.emplace_back(section + ".weight_decay", double_field(sub(&TrainConfig::weight_decay)));
  fields.emplace_back(section + ".warmup_epochs", size_field(sub(&TrainConfig::warmup_epochs)));
  fields.emplace_back(section + ".augment", bool_field(sub(&TrainConfig::augment)));
}

const std::vector<std::pair<std::string, Field>>& field_table() {
  static const auto table = [] {
    std::vector<std::pair<std::string, Field>> f;
    auto model = [](auto member) { return [member](auto& c) -> auto& { return c.model.*member; }; };

    f.emplace_back("run.seed", Field{[](RunConfig& c, const std::string& v) { c.seed = parse_u64(v); },
                                     [](const RunConfig& c) { return std::to_string(c.seed); }});
    f.emplace_back("run.threads", size_field(&RunConfig::threads));
    f.emplace_back("run.precision", string_field(&RunConfig::precision));
    f.emplace_back("run.out", path_field(&RunConfig::out));
    f.emplace_back("run.from_checkpoint", path_field(&RunConfig::from_checkpoint));

    f.emplace_back("model.size", Field{[](RunConfig& c, const std::string& v) {
                                         if (v != "ti" && v != "s" && v != "b") {
                                           throw ConfigError("model size must be ti, s or b, got '" + v + "'");
                                         }
                                         c.model = ModelConfig::named(v);
                                       },
                                       [](const RunConfig& c) { return c.model.name; }});
    f.emplace_back("model.layers", size_field(model(&ModelConfig::layers)));
    f.emplace_back("model.width", size_field(model(&ModelConfig::width)));
    f.emplace_back("model.heads", size_field(model(&ModelConfig::heads)));
    f.emplace_back("model.patch_size", size_field(model(&ModelConfig::patch_size)));
    f.emplace_back("model.mlp_ratio", size_field(model(&ModelConfig::mlp_ratio)));
    f.emplace_back("model.head_hidden", size_field(model(&ModelConfig::head_hidden)));
    f.emplace_back("model.mask_ratio", double_field(model(&ModelConfig::mask_ratio)));
    f.emplace_back("model.decoder_layers", size_field(model(&ModelConfig::decoder_layers)));
    f.emplace_back("model.decoder_width", size_field(model(&ModelConfig::decoder_width)));
    f.emplace_back("model.decoder_heads", size_field(model(&ModelConfig::decoder_heads)));
    f.emplace_back("model.pretrain_class_token", bool_field(model(&ModelConfig::pretrain_class_token)));
    f.emplace_back("model.pixel_mean", double_field(model(&ModelConfig::pixel_mean)));
    f.emplace_back("model.pixel_std", double_field(model(&ModelConfig::pixel_std)));

    add_phase_fields(f, "pretrain", &RunConfig::pretrain);
    add_phase_fields(f, "finetune", &RunConfig::finetune);
    f.emplace_back("finetune.freeze_encoder",
                   bool_field([](auto& c) -> auto& { return c.finetune.freeze_encoder; }));

    f.emplace_back("data.root", path_field(&RunConfig::data_root));
    f.emplace_back("data.manifest", path_field(&RunConfig::manifest));
    f.emplace_back("data.synthetic", size_field(&RunConfig::synthetic));
    f.emplace_back("data.split", string_field(&RunConfig::split));
    f.emplace_back("data.images", Field{[](RunConfig& c, const std::string& v) { c.images = split_list(v); },
                                        [](const RunConfig& c) {
                                          std::string out;
                                          for (const auto& p : c.images) out += (out.empty() ? "" : ",") + p;
                                          return out;
                                        }});
    f.emplace_back("data.max_images", size_field(&RunConfig::max_images));

    f.emplace_back("gradcam.layer", string_field(&RunConfig::gradcam_layer));
    f.emplace_back("gradcam.upsample", Field{[](RunConfig& c, const std::string& v) {
                                               if (v == "bilinear") c.upsample = Upsample::kBilinear;
                                               else if (v == "nearest") c.upsample = Upsample::kNearest;
                                               else throw ConfigError("upsample must be bilinear or nearest");
                                             },
                                             [](const RunConfig& c) {
                                               return std::string(c.upsample == Upsample::kNearest ? "nearest"
                                                                                                   : "bilinear");
                                             }});
    f.emplace_back("gradcam.alpha", double_field(&RunConfig::overlay_alpha));
    return f;
  }();
  return table;
}

const Field& find_field(const ConfigAssignment& a) {
  for (const auto& [key, field] : field_table())
    if (key == a.key) return field;
  throw ConfigError(a.origin + ": unknown key '" + a.key + "'");
}

}  // namespace

std::vector<ConfigAssignment> parse_config_text(const std::string& text, const std::string& source) {
  std::vector<ConfigAssignment> out;
  std::stringstream in(text);
  std::string line, section;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string where = source + ":" + std::to_string(number);
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": missing key");
    if (key.find('.') == std::string::npos) {
      if (section.empty()) throw ConfigError(where + ": key '" + key + "' outside a section");
      key = section + "." + key;
    }
    out.push_back({key, trim(line.substr(eq + 1)), where});
  }
  return out;
}

std::vector<ConfigAssignment> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path.string());
}

RunConfig RunConfig::resolve(const std::vector<ConfigAssignment>& assignments) {
  RunConfig c;
  auto apply = [&c](const ConfigAssignment& a) {
    const Field& field = find_field(a);
    try {
      field.set(c, a.value);
    } catch (const ConfigError& e) {
      throw ConfigError(a.origin + ": " + a.key + ": " + e.what());
    }
  };
  const auto size = std::find_if(assignments.rbegin(), assignments.rend(),
                                 [](const ConfigAssignment& a) { return a.key == "model.size"; });
  if (size != assignments.rend()) apply(*size);
  std::set<std::string> explicit_keys;
  for (const auto& a : assignments) {
    if (a.key == "model.size") continue;
    apply(a);
    explicit_keys.insert(a.key);
  }
  if (!explicit_keys.contains("pretrain.warmup_epochs")) c.pretrain.warmup_epochs = c.pretrain.epochs / 10;
  if (!explicit_keys.contains("finetune.warmup_epochs")) c.finetune.warmup_epochs = c.finetune.epochs / 10;
  c.finalize();
  return c;
}

void RunConfig::finalize() {
  for (TrainConfig* t : {&pretrain, &finetune}) {
    t->seed = seed;
    t->threads = threads;
    t->precision = precision;
  }
  model.validate();
  pretrain.validate();
  finetune.validate();
  if (split != "train" && split != "val" && split != "test") {
    throw ConfigError("data.split must be train, val or test, got '" + split + "'");
  }
  if (max_images < 1) throw ConfigError("data.max_images must be at least 1");
  if (synthetic != 0 && synthetic < 5) throw ConfigError("data.synthetic needs at least 5 LEDs");
  if (!(overlay_alpha >= 0.0 && overlay_alpha <= 1.0)) throw ConfigError("gradcam.alpha must lie in [0, 1]");
  if (out.empty()) throw ConfigError("run.out must not be empty");
}

std::string RunConfig::to_text() const {
  std::string text, section;
  for (const auto& [key, field] : field_table()) {
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      text += (section.empty() ? "[" : "\n[") + s + "]\n";
      section = s;
    }
    text += key.substr(dot + 1) + " = " + field.get(*this) + "\n";
  }
  return text;
}

std::filesystem::path RunConfig::manifest_path() const {
  return manifest.is_absolute() ? manifest : data_root / manifest;
}

const std::vector<std::string>& RunConfig::keys() {
  static const auto keys = [] {
    std::vector<std::string> k;
    for (const auto& [key, field] : field_table()) k.push_back(key);
    return k;
  }();
  return keys;
}

}  // namespace vitmae
