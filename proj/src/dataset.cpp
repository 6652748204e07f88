#include "celestial/dataset.hpp"

#include "celestial/errors.hpp"
#include "celestial/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <unordered_set>

namespace celestial {

std::string_view to_string(Split split) { return split == Split::Train ? "train" : "test"; }

std::optional<std::size_t> DatasetManifest::find(std::string_view id) const {
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].id == id) return i;
  return std::nullopt;
}

void DatasetManifest::validate() const {
  std::unordered_set<std::string_view> seen;
  for (const auto& e : entries) {
    if (e.id.empty()) throw ValidationError("empty id");
    if (!seen.insert(e.id).second) throw ValidationError("duplicate id: " + e.id);
    if (e.label && (*e.label < 0 || *e.label >= num_classes()))
      throw ValidationError("label " + std::to_string(*e.label) + " out of range for id " + e.id);
  }
}

namespace {

std::vector<std::string> split_on(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    parts.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

void chomp(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir,
                               ImageSize image_size) {
  DatasetManifest m;
  m.base_dir = base_dir;
  m.image_size = image_size;

  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  chomp(line);
  if (line != kManifestHeader)
    throw ParseError(1, "expected header '" + std::string(kManifestHeader) + "'");
  if (!std::getline(in, line)) throw ParseError(2, "missing class-name line");
  chomp(line);
  if (!line.empty()) m.class_names = split_on(line, ',');

  std::size_t lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    chomp(line);
    if (line.empty()) continue;
    auto fields = split_on(line, '\t');
    if (fields.size() != 4)
      throw ParseError(lineno, "expected 4 tab-separated fields, got " + std::to_string(fields.size()));
    ManifestEntry e;
    e.id = fields[0];
    e.path = fields[1];
    if (e.id.empty()) throw ParseError(lineno, "empty id");
    if (fields[2] != "-") {
      int label = 0;
      std::istringstream ls(fields[2]);
      if (!(ls >> label) || !ls.eof()) throw ParseError(lineno, "bad label '" + fields[2] + "'");
      e.label = label;
    }
    if (fields[3] == "train")
      e.split = Split::Train;
    else if (fields[3] == "test")
      e.split = Split::Test;
    else
      throw ParseError(lineno, "bad split tag '" + fields[3] + "'");
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path, ImageSize image_size) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open manifest: " + path.string());
  auto m = parse_manifest(in, path.parent_path(), image_size);
  m.source = path.stem().string();
  return m;
}

void write_manifest(const DatasetManifest& manifest, std::ostream& out) {
  out << kManifestHeader << '\n';
  for (std::size_t i = 0; i < manifest.class_names.size(); ++i)
    out << (i ? "," : "") << manifest.class_names[i];
  out << '\n';
  for (const auto& e : manifest.entries) {
    out << e.id << '\t' << e.path << '\t';
    if (e.label)
      out << *e.label;
    else
      out << '-';
    out << '\t' << to_string(e.split) << '\n';
  }
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest: " + path.string());
  write_manifest(manifest, out);
}

ImageSample decode_sample(const DatasetManifest& manifest, std::string_view id, ImageSize target) {
  auto idx = manifest.find(id);
  if (!idx) throw NotFoundError("no entry with id '" + std::string(id) + "'");
  const auto& e = manifest.entries[*idx];
  Image img = resize_bilinear(decode_image_file(manifest.resolve(e).string()), target);
  check_pixel_range(img);
  return {e.id, std::move(img), e.label, manifest.source};
}

ImageSample ImageSet::sample(std::size_t i) const {
  const auto& e = manifest.entries.at(i);
  return {e.id, images.at(i), e.label, manifest.source};
}

ImageSet decode_all(const DatasetManifest& manifest, ImageSize target) {
  ImageSet set{manifest, {}};
  set.manifest.image_size = target;
  set.images.reserve(manifest.size());
  for (const auto& e : manifest.entries)
    set.images.push_back(decode_sample(manifest, e.id, target).pixels);
  return set;
}

namespace {

constexpr double kTau = 2.0 * std::numbers::pi;

// Texture families, each a function of rotated, shifted coordinates returning
// a value in [-1, 1]. Families are closed under quarter-turn rotation.
double texture(int family, double period, double u, double v, const std::vector<double>& blobs,
               double radius) {
  switch (family) {
    case 0:
    case 1:
      return std::sin(kTau * v / period);
    case 2:
    case 3:
      return std::sin(kTau * u / period) * std::sin(kTau * v / period);
    case 4:
      return std::sin(kTau * (u + v) / (period * std::numbers::sqrt2));
    case 5:
    case 6: {
      double value = -1.0;
      for (std::size_t i = 0; i + 1 < blobs.size(); i += 2) {
        double d = std::hypot(u - blobs[i], v - blobs[i + 1]);
        value = std::max(value, 1.0 - 2.0 * std::clamp((d - radius + 1.0) / 2.0, 0.0, 1.0));
      }
      return value;
    }
    default:
      return std::sin(kTau * std::hypot(u, v) / period);
  }
}

struct FamilyShape {
  double period;
  int blob_count;
  double radius;
};

FamilyShape family_shape(int family, int tier, int size) {
  const double s = size / 64.0 * (1.0 + 0.5 * tier);
  switch (family) {
    case 0: return {16.0 * s, 0, 0};
    case 1: return {6.0 * s, 0, 0};
    case 2: return {16.0 * s, 0, 0};
    case 3: return {6.0 * s, 0, 0};
    case 4: return {10.0 * s, 0, 0};
    case 5: return {0, 24, 3.0 * s};
    case 6: return {0, 4, 10.0 * s};
    default: return {10.0 * s, 0, 0};
  }
}

Image render_synthetic(int label, ImageSize size, CounterRng& rng) {
  const int family = label % 8;
  const int tier = label / 8;
  const auto shape = family_shape(family, tier, size.width);

  const int turns = static_cast<int>(rng.below(4));
  const double shift_u = rng.uniform(0.0, 64.0);
  const double shift_v = rng.uniform(0.0, 64.0);
  const double base = rng.uniform(0.2, 0.8);
  const double amplitude = rng.uniform(0.08, 0.3);
  double gain[3];
  for (double& g : gain) g = 1.0 + rng.uniform(-0.05, 0.05);

  std::vector<double> blobs;
  for (int i = 0; i < shape.blob_count; ++i) {
    blobs.push_back(rng.uniform(0.0, size.width));
    blobs.push_back(rng.uniform(0.0, size.height));
  }
  const double cu = rng.uniform(0.25, 0.75) * size.width;
  const double cv = rng.uniform(0.25, 0.75) * size.height;

  Image img(size.height, size.width, 3);
  for (int y = 0; y < size.height; ++y) {
    for (int x = 0; x < size.width; ++x) {
      double u = x, v = y;
      for (int t = 0; t < turns; ++t) std::tie(u, v) = std::pair{-v, u};
      double p;
      if (family == 7)
        p = texture(family, shape.period, x - cu, y - cv, blobs, shape.radius);
      else if (shape.blob_count > 0)
        p = texture(family, shape.period, x, y, blobs, shape.radius);
      else
        p = texture(family, shape.period, u + shift_u, v + shift_v, blobs, shape.radius);
      for (int c = 0; c < 3; ++c) {
        double noise = rng.uniform(-0.1, 0.1);
        img.at(c, y, x) = static_cast<float>(std::clamp(gain[c] * (base + amplitude * p) + noise, 0.0, 1.0));
      }
    }
  }
  return img;
}

}  // namespace

ImageSet make_synthetic_dataset(int num_classes, int per_class, ImageSize image_size,
                                std::uint64_t seed) {
  if (num_classes < 2) throw ValidationError("synthetic dataset needs at least 2 classes");
  if (per_class < 2) throw ValidationError("synthetic dataset needs at least 2 samples per class");
  if (image_size.height <= 0 || image_size.width <= 0)
    throw ValidationError("image size must be positive");

  ImageSet set;
  auto& m = set.manifest;
  m.image_size = image_size;
  m.source = "synthetic";
  for (int c = 0; c < num_classes; ++c) m.class_names.push_back("class" + std::to_string(c));

  // Interleave classes so that prefixes of the set stay roughly balanced.
  for (int i = 0; i < per_class; ++i) {
    for (int c = 0; c < num_classes; ++c) {
      const std::uint64_t index = static_cast<std::uint64_t>(i) * num_classes + c;
      CounterRng rng(seed, index);
      char id[32];
      std::snprintf(id, sizeof id, "syn-%02d-%04d", c, i);
      m.entries.push_back({id, std::string("images/") + id + ".png", c, Split::Train});
      set.images.push_back(render_synthetic(c, image_size, rng));
    }
  }
  return set;
}

std::filesystem::path write_image_set(const ImageSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto path = dir / set.manifest.entries[i].path;
    std::filesystem::create_directories(path.parent_path());
    write_png(set.images[i], path.string());
  }
  auto manifest_path = dir / "manifest.tsv";
  write_manifest(set.manifest, manifest_path);
  return manifest_path;
}

namespace {

ImageSet select(const ImageSet& set, const std::vector<std::size_t>& keep) {
  ImageSet out;
  out.manifest = set.manifest;
  out.manifest.entries.clear();
  for (auto i : keep) {
    out.manifest.entries.push_back(set.manifest.entries[i]);
    out.images.push_back(set.images[i]);
  }
  return out;
}

}  // namespace

ImageSet select_split(const ImageSet& set, Split split) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < set.size(); ++i)
    if (set.manifest.entries[i].split == split) keep.push_back(i);
  return select(set, keep);
}

ImageSet subsample(const ImageSet& set, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("fraction must be in (0,1]");
  std::vector<std::size_t> order(set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 gen(seed);
  std::shuffle(order.begin(), order.end(), gen);
  order.resize(static_cast<std::size_t>(std::llround(fraction * static_cast<double>(set.size()))));
  std::sort(order.begin(), order.end());
  return select(set, order);
}

DatasetManifest stratified_train_test(const DatasetManifest& manifest, double train_fraction,
                                      std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction <= 1.0))
    throw ValidationError("train fraction must be in (0,1]");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& e = manifest.entries[i];
    if (!e.label) throw ValidationError("stratified split needs labels; '" + e.id + "' has none");
    by_class[*e.label].push_back(i);
  }
  DatasetManifest out = manifest;
  for (auto& [label, members] : by_class) {
    std::mt19937_64 gen(seed ^ (0x5851f42d4c957f2dULL * static_cast<std::uint64_t>(label + 1)));
    std::shuffle(members.begin(), members.end(), gen);
    const auto n_train = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(members.size())));
    for (std::size_t j = 0; j < members.size(); ++j)
      out.entries[members[j]].split = j < n_train ? Split::Train : Split::Test;
  }
  return out;
}

DatasetManifest without_labels(DatasetManifest manifest) {
  for (auto& e : manifest.entries) e.label.reset();
  return manifest;
}

}  // namespace celestial
