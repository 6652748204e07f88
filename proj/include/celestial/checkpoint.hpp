#pragma once

// Checkpoint container:
//   "CLSTL" | version (1 byte) | metadata length (u32 LE) | metadata (JSON)
//   | weight blobs (f32 LE, column-major) | CRC-32 of all preceding bytes (u32 LE)
// The metadata holds the model kind, config, frozen flag and a tensor
// directory of {name, shape, offset, bytes} relative to the blob start.

#include "celestial/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

namespace celestial {

inline constexpr std::uint8_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const FeaturizerModel& model);
std::vector<std::uint8_t> serialize_checkpoint(const ClassifierModel& model);
/// A bare head (used for per-session relevance heads).
std::vector<std::uint8_t> serialize_checkpoint(const ClassifierHead& head);

using AnyModel = std::variant<FeaturizerModel, ClassifierModel, ClassifierHead>;

/// Throws IntegrityError (bad magic, truncation, checksum) or
/// UnsupportedVersionError.
AnyModel deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

template <typename Model>
void save_checkpoint(const Model& model, const std::filesystem::path& path);

AnyModel load_checkpoint(const std::filesystem::path& path);
FeaturizerModel load_featurizer(const std::filesystem::path& path);
ClassifierModel load_classifier(const std::filesystem::path& path);

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes);

/// Lower-case hex SHA-256, used for provenance and content addressing.
std::string content_digest(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace celestial
