#include "celestial/index.hpp"

#include "celestial/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>
#include <set>

namespace celestial {

std::optional<std::size_t> EmbeddingIndex::find(std::string_view id) const {
  auto it = position_.find(std::string(id));
  if (it == position_.end()) return std::nullopt;
  return it->second;
}

void EmbeddingIndex::reindex() {
  position_.clear();
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (!position_.emplace(ids[i], i).second) throw ValidationError("duplicate id: " + ids[i]);
}

EmbeddingIndex build_index(std::vector<std::string> ids, const Eigen::MatrixXf& embeddings,
                           std::vector<std::optional<int>> labels) {
  const auto n = ids.size();
  if (static_cast<std::size_t>(embeddings.cols()) != n)
    throw ValidationError("id count does not match embedding count");
  if (!labels.empty() && labels.size() != n) throw ValidationError("label count does not match id count");
  if (labels.empty()) labels.assign(n, std::nullopt);

  EmbeddingIndex index;
  index.vectors.resize(embeddings.rows(), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::VectorXd v = embeddings.col(static_cast<Eigen::Index>(i)).cast<double>();
    const double norm = v.norm();
    if (norm == 0.0 || !std::isfinite(norm)) throw DomainError("zero or non-finite vector for id " + ids[i]);
    index.vectors.col(static_cast<Eigen::Index>(i)) = (v / norm).cast<float>();
  }
  index.ids = std::move(ids);
  index.labels = std::move(labels);
  index.reindex();
  return index;
}

EmbeddingIndex index_from_normalized(std::vector<std::string> ids, Eigen::MatrixXf vectors,
                                     std::vector<std::optional<int>> labels) {
  if (static_cast<std::size_t>(vectors.cols()) != ids.size())
    throw ValidationError("id count does not match embedding count");
  if (labels.empty()) labels.assign(ids.size(), std::nullopt);
  if (labels.size() != ids.size()) throw ValidationError("label count does not match id count");
  for (Eigen::Index i = 0; i < vectors.cols(); ++i)
    if (!(std::abs(vectors.col(i).cast<double>().norm() - 1.0) <= 1e-6))
      throw ValidationError("stored vector for id " + ids[static_cast<std::size_t>(i)] + " is not unit length");
  EmbeddingIndex index;
  index.ids = std::move(ids);
  index.vectors = std::move(vectors);
  index.labels = std::move(labels);
  index.reindex();
  return index;
}

std::vector<double> similarities(const EmbeddingIndex& index, const Eigen::VectorXf& query) {
  if (query.size() != index.vectors.rows() && index.size() > 0)
    throw ValidationError("query dimension does not match index");
  const double qn = query.cast<double>().norm();
  if (qn == 0.0 || !std::isfinite(qn)) throw DomainError("query vector is zero or non-finite");
  const Eigen::VectorXd q = query.cast<double>() / qn;
  std::vector<double> sims(index.size());
  const Eigen::Index d = index.vectors.rows();
  for (std::size_t j = 0; j < index.size(); ++j) {
    const float* v = index.vectors.data() + static_cast<Eigen::Index>(j) * d;
    double s = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) s += static_cast<double>(v[i]) * q(i);
    sims[j] = s;
  }
  return sims;
}

std::vector<Neighbor> knn_query(const EmbeddingIndex& index, const Eigen::VectorXf& query, int k,
                                std::optional<std::string_view> exclude_id) {
  if (k < 1) throw ValidationError("k must be at least 1");
  if (index.size() == 0) return {};
  const auto sims = similarities(index, query);
  std::vector<std::size_t> cand;
  cand.reserve(index.size());
  for (std::size_t j = 0; j < index.size(); ++j)
    if (!exclude_id || index.ids[j] != *exclude_id) cand.push_back(j);
  const auto better = [&](std::size_t a, std::size_t b) {
    if (sims[a] != sims[b]) return sims[a] > sims[b];
    return index.ids[a] < index.ids[b];
  };
  const std::size_t take = std::min(cand.size(), static_cast<std::size_t>(k));
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(), better);
  std::vector<Neighbor> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back({index.ids[cand[i]], sims[cand[i]], cand[i]});
  return out;
}

KnnReport kth_neighbor_accuracy(const EmbeddingIndex& index, int k_max) {
  if (k_max < 1) throw ValidationError("k_max must be at least 1");
  if (index.size() <= static_cast<std::size_t>(k_max))
    throw ValidationError("k_max must be smaller than the number of indexed points");
  std::set<int> classes;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (!index.labels[i]) throw ValidationError("unlabeled point '" + index.ids[i] + "' in kNN evaluation");
    classes.insert(*index.labels[i]);
  }
  KnnReport report;
  report.n = index.size();
  report.d = index.dim();
  report.num_classes = static_cast<int>(classes.size());
  std::vector<std::size_t> hits(static_cast<std::size_t>(k_max), 0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto nn = knn_query(index, index.vectors.col(static_cast<Eigen::Index>(i)), k_max, index.ids[i]);
    for (std::size_t k = 0; k < nn.size(); ++k)
      hits[k] += index.labels[nn[k].position] == index.labels[i];
  }
  for (auto h : hits) report.accuracy.push_back(static_cast<double>(h) / static_cast<double>(index.size()));
  return report;
}

void KnnReport::write_csv(std::ostream& out) const {
  out << "k,accuracy\n";
  char buf[64];
  for (std::size_t k = 0; k < accuracy.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f\n", k + 1, accuracy[k]);
    out << buf;
  }
}

namespace {

constexpr char kDumpMagic[8] = {'C', 'L', 'S', 'T', 'L', 'E', 'M', 'B'};
constexpr std::uint32_t kDumpVersion = 1;

static_assert(std::endian::native == std::endian::little, "dump I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IntegrityError("embedding dump is truncated");
  return v;
}

}  // namespace

void write_embedding_dump(const EmbeddingIndex& index, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kDumpMagic, 8);
  put<std::uint32_t>(out, kDumpVersion);
  put<std::uint64_t>(out, index.size());
  put<std::uint64_t>(out, static_cast<std::uint64_t>(index.dim()));
  for (std::size_t i = 0; i < index.size(); ++i) {
    put<std::int32_t>(out, index.labels[i] ? *index.labels[i] : -1);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(index.ids[i].size()));
    out.write(index.ids[i].data(), static_cast<std::streamsize>(index.ids[i].size()));
  }
  out.write(reinterpret_cast<const char*>(index.vectors.data()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(index.vectors.size())));
  if (!out) throw Error("short write to " + path.string());
}

EmbeddingIndex read_embedding_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kDumpMagic, 8) != 0)
    throw IntegrityError("not an embedding dump: " + path.string());
  const auto version = get<std::uint32_t>(in);
  if (version != kDumpVersion)
    throw UnsupportedVersionError("unsupported embedding dump version " + std::to_string(version));
  const auto n = get<std::uint64_t>(in);
  const auto d = get<std::uint64_t>(in);
  std::vector<std::string> ids(n);
  std::vector<std::optional<int>> labels(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto label = get<std::int32_t>(in);
    if (label >= 0) labels[i] = label;
    const auto len = get<std::uint32_t>(in);
    ids[i].resize(len);
    if (!in.read(ids[i].data(), len)) throw IntegrityError("embedding dump is truncated");
  }
  Eigen::MatrixXf vectors(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n));
  if (!in.read(reinterpret_cast<char*>(vectors.data()),
               static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(vectors.size()))))
    throw IntegrityError("embedding dump is truncated");
  return index_from_normalized(std::move(ids), std::move(vectors), std::move(labels));
}

}  // namespace celestial
