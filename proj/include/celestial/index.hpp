#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace celestial {

/// Exact cosine-similarity store. Vectors are L2-normalized on insert and kept
/// as columns of a d x n matrix in insertion order.
struct EmbeddingIndex {
  std::vector<std::string> ids;
  Eigen::MatrixXf vectors;
  std::vector<std::optional<int>> labels;

  std::size_t size() const { return ids.size(); }
  int dim() const { return static_cast<int>(vectors.rows()); }
  std::optional<std::size_t> find(std::string_view id) const;

  /// Rebuilds the id lookup; throws ValidationError on duplicate ids.
  void reindex();

 private:
  std::unordered_map<std::string, std::size_t> position_;
};

/// embeddings is d x n. Throws ValidationError on duplicate ids or a size
/// mismatch, DomainError on a zero vector.
EmbeddingIndex build_index(std::vector<std::string> ids, const Eigen::MatrixXf& embeddings,
                           std::vector<std::optional<int>> labels = {});

/// Adopts already-normalized vectors verbatim (norms checked to 1e-6).
EmbeddingIndex index_from_normalized(std::vector<std::string> ids, Eigen::MatrixXf vectors,
                                     std::vector<std::optional<int>> labels = {});

struct Neighbor {
  std::string id;
  double similarity = 0.0;
  std::size_t position = 0;
};

/// Top-k by descending cosine similarity, ties broken by ascending id. Returns
/// every candidate when k exceeds the candidate count.
std::vector<Neighbor> knn_query(const EmbeddingIndex& index, const Eigen::VectorXf& query, int k,
                                std::optional<std::string_view> exclude_id = std::nullopt);

/// Cosine similarity of query to every stored vector, in insertion order.
std::vector<double> similarities(const EmbeddingIndex& index, const Eigen::VectorXf& query);

/// accuracy[k-1] = fraction of points whose k-th ranked neighbor (self
/// excluded) shares their label.
struct KnnReport {
  std::vector<double> accuracy;
  std::size_t n = 0;
  int d = 0;
  int num_classes = 0;
  std::uint64_t seed = 0;

  void write_csv(std::ostream& out) const;
};

KnnReport kth_neighbor_accuracy(const EmbeddingIndex& index, int k_max);

// Embedding dump:
//   "CLSTLEMB" | version u32 | n u64 | d u64 | n x (label i32, id length u32, id bytes)
//   | n rows of d little-endian f32
void write_embedding_dump(const EmbeddingIndex& index, const std::filesystem::path& path);
EmbeddingIndex read_embedding_dump(const std::filesystem::path& path);

}  // namespace celestial
