#include "vitmae/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <utility>

#include "vitmae/errors.hpp"

namespace vitmae {

namespace fs = std::filesystem;

double compute_label(double b_max_t, double b_max_0, const std::string& led_id) {
  const std::string who = led_id.empty() ? std::string() : " for LED " + led_id;
  if (!(b_max_0 > 0.0)) throw DataError("baseline b_max must be positive" + who);
  if (!(b_max_t > 0.0)) throw DataError("b_max must be positive" + who);
  return b_max_t / b_max_0 - 1.0;
}

namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(trim(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  fields.push_back(trim(field));
  return fields;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<ManifestRow> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (!header_seen) {
      const std::vector<std::string> expected = {"image_path", "led_id", "led_type", "tsc", "b_max"};
      if (fields != expected) {
        throw DataError("manifest " + path.string() + " must start with header image_path,led_id,led_type,tsc,b_max");
      }
      header_seen = true;
      continue;
    }
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != 5) throw DataError("expected 5 columns at " + where);
    ManifestRow row;
    row.image_path = fields[0];
    row.led_id = fields[1];
    row.led_type = fields[2];
    try {
      std::size_t used = 0;
      row.tsc = std::stoi(fields[3], &used);
      if (used != fields[3].size()) throw std::invalid_argument("tsc");
      row.b_max = std::stod(fields[4], &used);
      if (used != fields[4].size()) throw std::invalid_argument("b_max");
    } catch (const std::logic_error&) {
      throw DataError("unparseable tsc or b_max at " + where);
    }
    if (row.image_path.empty() || row.led_id.empty()) throw DataError("empty image_path or led_id at " + where);
    rows.push_back(std::move(row));
  }
  if (!header_seen) throw DataError("manifest " + path.string() + " is empty");
  return rows;
}

void write_manifest(const fs::path& path, const std::vector<ManifestRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << "image_path,led_id,led_type,tsc,b_max\n";
  for (const auto& r : rows) {
    out << csv_field(r.image_path) << ',' << csv_field(r.led_id) << ',' << csv_field(r.led_type) << ',' << r.tsc
        << ',' << format_double(r.b_max) << '\n';
  }
  if (!out) throw DataError("write failed for manifest " + path.string());
}

std::vector<double> labels_from_rows(const std::vector<ManifestRow>& rows) {
  std::map<std::string, double> baseline;
  std::set<std::pair<std::string, int>> seen;
  for (const auto& r : rows) {
    if (!seen.emplace(r.led_id, r.tsc).second) {
      throw DataError("duplicate row for LED " + r.led_id + " at tsc " + std::to_string(r.tsc));
    }
    if (!(r.b_max > 0.0)) throw DataError("b_max must be positive for LED " + r.led_id);
    if (r.tsc == 0) baseline[r.led_id] = r.b_max;
  }
  std::vector<double> labels;
  labels.reserve(rows.size());
  for (const auto& r : rows) {
    auto it = baseline.find(r.led_id);
    if (it == baseline.end()) throw DataError("LED " + r.led_id + " has no tsc=0 baseline row");
    labels.push_back(compute_label(r.b_max, it->second, r.led_id));
  }
  return labels;
}

std::vector<LabeledSample> load_dataset(const fs::path& root, const fs::path& manifest_path) {
  const auto rows = read_manifest(manifest_path);
  const auto labels = labels_from_rows(rows);
  std::vector<LabeledSample> samples;
  samples.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const fs::path file = fs::path(r.image_path).is_absolute() ? fs::path(r.image_path) : root / r.image_path;
    if (!fs::exists(file)) throw DataError("image not found: " + file.string() + " (LED " + r.led_id + ")");
    Raster img = read_gray_image(file);
    if (img.width != kImageSide || img.height != kImageSide) {
      throw DataError("image " + file.string() + " is " + std::to_string(img.width) + "x" +
                      std::to_string(img.height) + ", expected 64x64");
    }
    LabeledSample s;
    s.image = raster_to_tensor(img);
    s.delta_b_max = labels[i];
    s.led_id = r.led_id;
    s.tsc = r.tsc;
    s.led_type = r.led_type;
    s.image_path = r.image_path;
    samples.push_back(std::move(s));
  }
  return samples;
}

const std::vector<std::size_t>& SplitManifest::named(const std::string& split) const {
  if (split == "train") return train;
  if (split == "val") return val;
  if (split == "test") return test;
  throw ConfigError("unknown split '" + split + "' (expected train, val or test)");
}

SplitManifest split_by_led(const std::vector<std::string>& led_ids, std::uint64_t seed) {
  if (led_ids.empty()) throw DataError("cannot split an empty dataset");
  std::vector<std::string> leds(led_ids.begin(), led_ids.end());
  std::sort(leds.begin(), leds.end());
  leds.erase(std::unique(leds.begin(), leds.end()), leds.end());
  if (leds.size() < 5) {
    throw DataError("splitting needs at least 5 LEDs, got " + std::to_string(leds.size()));
  }
  Rng rng(seed, "split");
  for (std::size_t i = leds.size(); i > 1; --i) std::swap(leds[i - 1], leds[rng.below(i)]);
  const std::size_t n = leds.size();
  const auto n_train = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
  std::map<std::string, int> assignment;
  for (std::size_t i = 0; i < n; ++i) assignment[leds[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
  SplitManifest m;
  m.seed = seed;
  for (std::size_t i = 0; i < led_ids.size(); ++i) {
    switch (assignment[led_ids[i]]) {
      case 0: m.train.push_back(i); break;
      case 1: m.val.push_back(i); break;
      default: m.test.push_back(i); break;
    }
  }
  return m;
}

SplitManifest split_dataset(const std::vector<LabeledSample>& samples, std::uint64_t seed) {
  std::vector<std::string> ids;
  ids.reserve(samples.size());
  for (const auto& s : samples) ids.push_back(s.led_id);
  return split_by_led(ids, seed);
}

namespace {

void require_square_image(const Tensor<float>& image, const char* what) {
  if (image.rank() != 3 || image.dim(2) != 1) {
    throw DimensionError(std::string(what) + " expects an [H×W×1] image, got " + shape_string(image.shape()));
  }
}

}  // namespace

Tensor<float> flip_horizontal(const Tensor<float>& image) {
  require_square_image(image, "flip_horizontal");
  const std::size_t h = image.dim(0), w = image.dim(1);
  Tensor<float> out(image.shape());
  auto src = image.data();
  auto dst = out.mutable_data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) dst[y * w + x] = src[y * w + (w - 1 - x)];
  return out;
}

Tensor<float> flip_vertical(const Tensor<float>& image) {
  require_square_image(image, "flip_vertical");
  const std::size_t h = image.dim(0), w = image.dim(1);
  Tensor<float> out(image.shape());
  auto src = image.data();
  auto dst = out.mutable_data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) dst[y * w + x] = src[(h - 1 - y) * w + x];
  return out;
}

Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t out_h, std::size_t out_w) {
  require_square_image(image, "resize_bilinear");
  const std::size_t h = image.dim(0), w = image.dim(1);
  Tensor<float> out({out_h, out_w, 1});
  auto src = image.data();
  auto dst = out.mutable_data();
  auto coord = [](std::size_t d, std::size_t in, std::size_t outn) {
    const double s = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = coord(y, h, out_h);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = coord(x, w, out_w);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
      const double bottom = (1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
      dst[y * out_w + x] = static_cast<float>((1 - fy) * top + fy * bottom);
    }
  }
  return out;
}

AugmentParams sample_augment(Rng& rng) {
  AugmentParams p;
  p.hflip = rng.bernoulli(0.5);
  p.vflip = rng.bernoulli(0.5);
  p.crop_x = rng.below(kImageSide - kCropSide + 1);
  p.crop_y = rng.below(kImageSide - kCropSide + 1);
  return p;
}

Tensor<float> apply_augment(const Tensor<float>& image, const AugmentParams& params) {
  require_square_image(image, "augment");
  if (image.dim(0) != kImageSide || image.dim(1) != kImageSide) {
    throw DimensionError("augment expects a 64x64x1 image, got " + shape_string(image.shape()));
  }
  if (params.crop_x + kCropSide > kImageSide || params.crop_y + kCropSide > kImageSide) {
    throw ConfigError("crop window leaves the image");
  }
  Tensor<float> img = image;
  if (params.hflip) img = flip_horizontal(img);
  if (params.vflip) img = flip_vertical(img);
  Tensor<float> crop({kCropSide, kCropSide, 1});
  auto src = img.data();
  auto dst = crop.mutable_data();
  for (std::size_t y = 0; y < kCropSide; ++y)
    for (std::size_t x = 0; x < kCropSide; ++x)
      dst[y * kCropSide + x] = src[(y + params.crop_y) * kImageSide + (x + params.crop_x)];
  return resize_bilinear(crop, kImageSide, kImageSide);
}

Tensor<float> augment(const Tensor<float>& image, Rng& rng) { return apply_augment(image, sample_augment(rng)); }

namespace {

struct Rect {
  int x0, y0, x1, y1;  // inclusive
  bool contains(double x, double y, double margin = 0.0) const {
    return x >= x0 + margin && x <= x1 - margin && y >= y0 + margin && y <= y1 - margin;
  }
};

struct Void {
  double cx, cy, r;
};

struct CrackPath {
  std::vector<std::pair<int, int>> pixels;  // in growth order, may repeat
};

// Growth fraction of each crack at the five TSC steps.
constexpr double kGrowth[] = {0.0, 0.15, 0.4, 0.7, 1.0};

std::vector<Rect> pad_layout(int type, Rng& rng) {
  const int layout = type % 3;
  const int margin = 5 + (type / 3) + static_cast<int>(rng.below(3));
  const int gap = 4 + 2 * (type / 3);
  const int lo = margin, hi = static_cast<int>(kImageSide) - 1 - margin;
  std::vector<Rect> pads;
  if (layout == 0) {
    pads.push_back({lo, lo, hi, hi});
  } else if (layout == 1) {
    const int mid = (lo + hi) / 2;
    pads.push_back({lo, lo, mid - gap / 2, hi});
    pads.push_back({mid + gap - gap / 2, lo, hi, hi});
  } else {
    const int mid = (lo + hi) / 2;
    const int a = mid - gap / 2, b = mid + gap - gap / 2;
    pads.push_back({lo, lo, a, a});
    pads.push_back({b, lo, hi, a});
    pads.push_back({lo, b, a, hi});
    pads.push_back({b, b, hi, hi});
  }
  return pads;
}

CrackPath grow_path(const Rect& pad, const Void& seed, double length, int thickness, Rng& rng) {
  CrackPath path;
  double angle = rng.uniform() * 2.0 * std::numbers::pi;
  double x = seed.cx + std::cos(angle) * seed.r;
  double y = seed.cy + std::sin(angle) * seed.r;
  const auto steps = static_cast<int>(length);
  for (int s = 0; s < steps; ++s) {
    angle += rng.normal(0.0, 0.35);
    double nx = x + std::cos(angle), ny = y + std::sin(angle);
    int tries = 0;
    while (!pad.contains(nx, ny, 1.0) && tries < 6) {
      angle += (rng.bernoulli(0.5) ? 1.0 : -1.0) * std::numbers::pi / 2.0;
      nx = x + std::cos(angle);
      ny = y + std::sin(angle);
      ++tries;
    }
    if (!pad.contains(nx, ny, 1.0)) break;
    x = nx;
    y = ny;
    const int px = static_cast<int>(std::lround(x)), py = static_cast<int>(std::lround(y));
    path.pixels.emplace_back(px, py);
    if (thickness > 1) {
      const bool horizontal_step = std::abs(std::cos(angle)) > std::abs(std::sin(angle));
      path.pixels.emplace_back(horizontal_step ? px : px + 1, horizontal_step ? py + 1 : py);
    }
  }
  return path;
}

}  // namespace

SyntheticCorpus synth_generate(std::size_t n_leds, std::uint64_t seed) {
  if (n_leds < 5) throw ConfigError("synthetic corpus needs at least 5 LEDs");
  constexpr int S = static_cast<int>(kImageSide);
  SyntheticCorpus corpus;
  for (std::size_t led = 0; led < n_leds; ++led) {
    Rng rng(seed, "synth.led", led);
    const int type = static_cast<int>(rng.below(9));
    char id_buf[32];
    std::snprintf(id_buf, sizeof id_buf, "led_%05zu", led);
    SyntheticLed info{id_buf, "type_" + std::to_string(type), {}};

    const auto pads = pad_layout(type, rng);
    const double gap_level = 185.0 + rng.normal(0.0, 6.0);
    const double pad_level = 65.0 + 8.0 * (type / 3) + rng.normal(0.0, 5.0);
    const double tilt_x = rng.normal(0.0, 0.15), tilt_y = rng.normal(0.0, 0.15);

    std::vector<Void> voids;
    std::vector<std::size_t> void_pad;
    const int n_voids = 2 + static_cast<int>(rng.below(4));
    for (int v = 0; v < n_voids; ++v) {
      const std::size_t p = rng.below(pads.size());
      const Rect& pad = pads[p];
      const double r = 1.5 + 1.5 * rng.uniform();
      const double span_x = pad.x1 - pad.x0 - 2 * (r + 2), span_y = pad.y1 - pad.y0 - 2 * (r + 2);
      if (span_x <= 0 || span_y <= 0) continue;
      voids.push_back({pad.x0 + r + 2 + rng.uniform() * span_x, pad.y0 + r + 2 + rng.uniform() * span_y, r});
      void_pad.push_back(p);
    }

    // About a quarter of the joints never crack; the rest get 1-3 cracks whose
    // final length scales with a per-LED severity.
    std::vector<CrackPath> cracks;
    const bool robust = rng.bernoulli(0.25);
    const double severity = std::pow(rng.uniform(), 1.3);
    if (!robust && !voids.empty()) {
      const std::size_t n_cracks = std::min<std::size_t>(voids.size(), 1 + rng.below(3));
      for (std::size_t c = 0; c < n_cracks; ++c) {
        const double length = 6.0 + 40.0 * severity * (0.6 + 0.4 * rng.uniform());
        const int thickness = rng.bernoulli(0.5) ? 2 : 1;
        cracks.push_back(grow_path(pads[void_pad[c]], voids[c], length, thickness, rng));
      }
    }

    const double b_max0 = 0.8 + 0.8 * rng.uniform();
    const double crack_level = 228.0 + rng.normal(0.0, 6.0);
    const double void_level = pad_level + 50.0;

    for (std::size_t t = 0; t < std::size(kTscValues); ++t) {
      Rng noise(seed, "synth.image", led * 8 + t);
      std::vector<double> canvas(kImageSide * kImageSide, gap_level);
      std::vector<std::uint8_t> mask(kImageSide * kImageSide, 0);
      for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
          for (const auto& pad : pads) {
            if (pad.contains(x, y)) {
              canvas[y * S + x] = pad_level + tilt_x * (x - S / 2) + tilt_y * (y - S / 2);
              break;
            }
          }
        }
      }
      for (const auto& v : voids) {
        for (int y = 0; y < S; ++y) {
          for (int x = 0; x < S; ++x) {
            const double d = std::hypot(x - v.cx, y - v.cy);
            const double w = std::clamp(v.r + 0.5 - d, 0.0, 1.0);
            if (w > 0) canvas[y * S + x] = (1 - w) * canvas[y * S + x] + w * void_level;
          }
        }
      }
      for (const auto& crack : cracks) {
        const auto grown = static_cast<std::size_t>(std::floor(kGrowth[t] * static_cast<double>(crack.pixels.size())));
        for (std::size_t i = 0; i < grown; ++i) {
          const auto [px, py] = crack.pixels[i];
          if (px < 0 || py < 0 || px >= S || py >= S) continue;
          mask[py * S + px] = 1;
        }
      }
      std::size_t crack_pixels = 0;
      for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) {
          canvas[i] = crack_level;
          ++crack_pixels;
        }
      }
      info.crack_pixels.push_back(crack_pixels);

      Raster raster(kImageSide, kImageSide, 1);
      for (std::size_t i = 0; i < canvas.size(); ++i) {
        const double v = canvas[i] + noise.normal(0.0, 5.0);
        raster.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }

      double b_max = b_max0;
      if (t > 0) {
        const double truth = 0.004 * static_cast<double>(crack_pixels);
        const double delta = std::max(-0.05, truth * (1.0 + noise.normal(0.0, 0.05)) + noise.normal(0.0, 0.02));
        b_max = b_max0 * (1.0 + delta);
      }

      char name_buf[64];
      std::snprintf(name_buf, sizeof name_buf, "%s_t%04d.png", id_buf, kTscValues[t]);
      ManifestRow row{std::string("images/") + name_buf, info.led_id, info.led_type, kTscValues[t], b_max};

      LabeledSample sample;
      sample.image = raster_to_tensor(raster);
      sample.delta_b_max = compute_label(b_max, b_max0, info.led_id);
      sample.led_id = info.led_id;
      sample.tsc = kTscValues[t];
      sample.led_type = info.led_type;
      sample.image_path = row.image_path;

      std::vector<float> mask_values(mask.begin(), mask.end());
      corpus.crack_masks.emplace_back(Shape{kImageSide, kImageSide, 1}, std::move(mask_values));
      corpus.samples.push_back(std::move(sample));
      corpus.rows.push_back(std::move(row));
    }
    corpus.leds.push_back(std::move(info));
  }
  return corpus;
}

void write_corpus(const SyntheticCorpus& corpus, const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    const auto& s = corpus.samples[i];
    write_image(dir / s.image_path, tensor_to_raster(s.image));
    Raster mask = tensor_to_raster(corpus.crack_masks[i]);
    write_image(dir / "masks" / fs::path(s.image_path).filename(), mask);
  }
  write_manifest(dir / "manifest.csv", corpus.rows);
}

std::vector<Tensor<float>> load_masks(const fs::path& dir, const std::vector<LabeledSample>& samples) {
  std::vector<Tensor<float>> masks;
  masks.reserve(samples.size());
  for (const auto& s : samples) {
    const fs::path file = dir / "masks" / fs::path(s.image_path).filename();
    if (!fs::exists(file)) throw DataError("crack mask not found: " + file.string());
    Tensor<float> m = raster_to_tensor(read_gray_image(file));
    for (auto& v : m.mutable_data()) v = v > 0.5f ? 1.0f : 0.0f;
    masks.push_back(std::move(m));
  }
  return masks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw DimensionError("pearson needs two equal-length series");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace vitmae
