#include "celestial/checkpoint.hpp"

#include "celestial/errors.hpp"

#include <json.hpp>
#include <openssl/sha.h>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

namespace celestial {

using nlohmann::ordered_json;
using nn::Matrix;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[5] = {'C', 'L', 'S', 'T', 'L'};
constexpr std::size_t kHeaderSize = 5 + 1 + 4;

ordered_json config_to_json(const FeaturizerConfig& c) {
  ordered_json j;
  j["height"] = c.height;
  j["width"] = c.width;
  j["channels"] = c.channels;
  j["conv_blocks"] = ordered_json::array();
  for (const auto& b : c.conv_blocks)
    j["conv_blocks"].push_back({{"filters", b.filters}, {"kernel", b.kernel}, {"stride", b.stride}, {"pool", b.pool}});
  j["embedding_dim"] = c.embedding_dim;
  j["projection_hidden"] = c.projection_hidden;
  j["projection_dim"] = c.projection_dim;
  j["param_budget"] = c.param_budget;
  j["param_tolerance"] = c.param_tolerance;
  return j;
}

FeaturizerConfig config_from_json(const ordered_json& j) {
  FeaturizerConfig c;
  c.height = j.at("height");
  c.width = j.at("width");
  c.channels = j.at("channels");
  c.conv_blocks.clear();
  for (const auto& b : j.at("conv_blocks"))
    c.conv_blocks.push_back({b.at("filters"), b.at("kernel"), b.at("stride"), b.at("pool")});
  c.embedding_dim = j.at("embedding_dim");
  c.projection_hidden = j.at("projection_hidden");
  c.projection_dim = j.at("projection_dim");
  c.param_budget = j.at("param_budget");
  c.param_tolerance = j.at("param_tolerance");
  return c;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::vector<std::uint8_t> assemble(ordered_json meta, const std::vector<nn::ConstParamRef>& tensors) {
  std::vector<std::uint8_t> blob;
  ordered_json dir = ordered_json::array();
  for (const auto& t : tensors) {
    const std::size_t bytes = sizeof(float) * static_cast<std::size_t>(t.value->size());
    dir.push_back({{"name", t.name},
                   {"shape", {t.value->rows(), t.value->cols()}},
                   {"offset", blob.size()},
                   {"bytes", bytes}});
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.value->data());
    blob.insert(blob.end(), p, p + bytes);
  }
  meta["tensors"] = std::move(dir);
  const std::string text = meta.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 5);
  out.push_back(kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), blob.begin(), blob.end());
  put_u32(out, crc32_of(out));
  return out;
}

std::vector<nn::ConstParamRef> head_tensors(const ClassifierHead& h) {
  return {{"head.hidden.weight", &h.hidden.weight},
          {"head.hidden.bias", &h.hidden.bias},
          {"head.out.weight", &h.out.weight},
          {"head.out.bias", &h.out.bias}};
}

// Builds an empty-shaped model from metadata, then fills tensors by name.
struct Reader {
  const ordered_json& dir;
  const std::uint8_t* blob;
  std::size_t blob_size;

  void fill(const std::vector<nn::ParamRef>& params) const {
    if (params.size() != dir.size()) throw IntegrityError("tensor directory does not match model layout");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& d = dir[i];
      if (d.at("name").get<std::string>() != params[i].name)
        throw IntegrityError("unexpected tensor '" + d.at("name").get<std::string>() + "'");
      const Eigen::Index rows = d.at("shape")[0], cols = d.at("shape")[1];
      const std::size_t offset = d.at("offset"), bytes = d.at("bytes");
      if (bytes != sizeof(float) * static_cast<std::size_t>(rows * cols) || offset + bytes > blob_size)
        throw IntegrityError("tensor '" + params[i].name + "' extends past the weight blob");
      params[i].value->resize(rows, cols);
      std::memcpy(params[i].value->data(), blob + offset, bytes);
    }
  }
};

FeaturizerModel skeleton(const FeaturizerConfig& c, bool with_projection) {
  FeaturizerModel m;
  m.config = c;
  int in = c.channels;
  for (const auto& b : c.conv_blocks) {
    nn::Conv2d conv;
    conv.in_channels = in;
    conv.out_channels = b.filters;
    conv.kernel = b.kernel;
    conv.stride = b.stride;
    m.convs.push_back(conv);
    in = b.filters;
  }
  if (with_projection) m.projection.emplace();
  return m;
}

}  // namespace

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

std::string content_digest(const std::vector<std::uint8_t>& bytes) {
  unsigned char md[SHA256_DIGEST_LENGTH];
  SHA256(bytes.data(), bytes.size(), md);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned char c : md) {
    out.push_back(hex[c >> 4]);
    out.push_back(hex[c & 15]);
  }
  return out;
}

std::vector<std::uint8_t> serialize_checkpoint(const FeaturizerModel& model) {
  ordered_json meta;
  meta["kind"] = "featurizer";
  meta["config"] = config_to_json(model.config);
  meta["frozen"] = model.frozen;
  meta["projection"] = model.has_projection();
  return assemble(std::move(meta), model.parameters());
}

std::vector<std::uint8_t> serialize_checkpoint(const ClassifierModel& model) {
  ordered_json meta;
  meta["kind"] = "classifier";
  meta["config"] = config_to_json(model.featurizer.config);
  meta["frozen"] = model.featurizer.frozen;
  meta["projection"] = model.featurizer.has_projection();
  meta["num_classes"] = model.num_classes();
  meta["hidden_dim"] = model.hidden_dim();
  return assemble(std::move(meta), model.parameters());
}

std::vector<std::uint8_t> serialize_checkpoint(const ClassifierHead& head) {
  ordered_json meta;
  meta["kind"] = "head";
  return assemble(std::move(meta), head_tensors(head));
}

AnyModel deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeaderSize + 4 || std::memcmp(bytes.data(), kMagic, 5) != 0)
    throw IntegrityError("not a checkpoint (bad magic or too short)");
  const std::uint8_t version = bytes[5];
  if (version != kCheckpointVersion)
    throw UnsupportedVersionError("unsupported checkpoint format version " + std::to_string(version) +
                                  " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  const std::size_t body = bytes.size() - 4;
  const std::uint32_t stored = get_u32(bytes.data() + body);
  const std::vector<std::uint8_t> prefix(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(body));
  if (crc32_of(prefix) != stored) throw IntegrityError("checkpoint checksum mismatch (corrupt or truncated)");

  const std::uint32_t meta_len = get_u32(bytes.data() + 6);
  if (kHeaderSize + meta_len > body) throw IntegrityError("metadata block extends past end of file");
  ordered_json meta;
  try {
    meta = ordered_json::parse(bytes.begin() + kHeaderSize, bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderSize + meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("unreadable checkpoint metadata: ") + e.what());
  }
  const std::uint8_t* blob = bytes.data() + kHeaderSize + meta_len;
  const std::size_t blob_size = body - kHeaderSize - meta_len;

  try {
    const Reader reader{meta.at("tensors"), blob, blob_size};
    const std::string kind = meta.at("kind");
    if (kind == "head") {
      ClassifierHead h;
      std::vector<nn::ParamRef> refs{{"head.hidden.weight", &h.hidden.weight},
                                     {"head.hidden.bias", &h.hidden.bias},
                                     {"head.out.weight", &h.out.weight},
                                     {"head.out.bias", &h.out.bias}};
      reader.fill(refs);
      return h;
    }
    FeaturizerModel f = skeleton(config_from_json(meta.at("config")), meta.at("projection").get<bool>());
    f.frozen = meta.at("frozen");
    if (kind == "featurizer") {
      reader.fill(f.parameters());
      return f;
    }
    if (kind == "classifier") {
      ClassifierModel c;
      c.featurizer = std::move(f);
      reader.fill(c.parameters(false));
      return c;
    }
    throw IntegrityError("unknown checkpoint kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("malformed checkpoint metadata: ") + e.what());
  }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  // Write-then-rename so readers never see a partial file.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename Model>
void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_checkpoint(model));
}

template void save_checkpoint<FeaturizerModel>(const FeaturizerModel&, const std::filesystem::path&);
template void save_checkpoint<ClassifierModel>(const ClassifierModel&, const std::filesystem::path&);
template void save_checkpoint<ClassifierHead>(const ClassifierHead&, const std::filesystem::path&);

AnyModel load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file_bytes(path));
}

FeaturizerModel load_featurizer(const std::filesystem::path& path) {
  auto any = load_checkpoint(path);
  if (auto* f = std::get_if<FeaturizerModel>(&any)) return std::move(*f);
  throw ValidationError(path.string() + " is not a featurizer checkpoint");
}

ClassifierModel load_classifier(const std::filesystem::path& path) {
  auto any = load_checkpoint(path);
  if (auto* c = std::get_if<ClassifierModel>(&any)) return std::move(*c);
  throw ValidationError(path.string() + " is not a classifier checkpoint");
}

}  // namespace celestial
