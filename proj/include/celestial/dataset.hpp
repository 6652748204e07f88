#pragma once

#include "celestial/image.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace celestial {

enum class Split { Train, Test };

std::string_view to_string(Split split);

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest's directory
  std::optional<int> label;
  Split split = Split::Train;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// Line-delimited dataset description. image_size is the decode target and is
/// not part of the file; load_manifest takes it as an argument.
struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> class_names;
  ImageSize image_size;
  std::filesystem::path base_dir;
  std::string source;

  std::size_t size() const { return entries.size(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::optional<std::size_t> find(std::string_view id) const;
  std::filesystem::path resolve(const ManifestEntry& entry) const { return base_dir / entry.path; }

  /// Throws ValidationError on duplicate ids or out-of-range labels.
  void validate() const;

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.entries == b.entries && a.class_names == b.class_names &&
           a.image_size == b.image_size;
  }
};

inline constexpr std::string_view kManifestHeader = "celestial-manifest v1";

DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {},
                               ImageSize image_size = {});
DatasetManifest load_manifest(const std::filesystem::path& path, ImageSize image_size = {});
void write_manifest(const DatasetManifest& manifest, std::ostream& out);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct ImageSample {
  std::string id;
  Image pixels;
  std::optional<int> label;
  std::string source;
};

/// Decode one entry from disk, resized to target. Throws NotFoundError for an
/// unknown id and DecodeError for an unreadable file.
ImageSample decode_sample(const DatasetManifest& manifest, std::string_view id, ImageSize target);

/// A manifest together with its decoded pixels, images[i] belonging to entries[i].
struct ImageSet {
  DatasetManifest manifest;
  std::vector<Image> images;

  std::size_t size() const { return images.size(); }
  ImageSample sample(std::size_t i) const;
};

ImageSet decode_all(const DatasetManifest& manifest, ImageSize target);

/// Class-structured textures, deterministic under seed, balanced classes.
/// Every entry is tagged Train; see stratified_train_test for a held-out split.
ImageSet make_synthetic_dataset(int num_classes, int per_class, ImageSize image_size,
                                std::uint64_t seed);

/// Writes images as PNG under dir/images and the manifest as dir/manifest.tsv.
std::filesystem::path write_image_set(const ImageSet& set, const std::filesystem::path& dir);

/// Entries (and images) whose split tag matches.
ImageSet select_split(const ImageSet& set, Split split);

/// Label-free uniform subset of round(fraction * n) entries, original order kept.
ImageSet subsample(const ImageSet& set, double fraction, std::uint64_t seed);

/// Retags entries so that, per class, round(train_fraction * n_c) entries are
/// Train and the rest Test. Every entry must be labeled.
DatasetManifest stratified_train_test(const DatasetManifest& manifest, double train_fraction,
                                      std::uint64_t seed);

DatasetManifest without_labels(DatasetManifest manifest);

}  // namespace celestial
