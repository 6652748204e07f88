#include "celestial/config.hpp"

#include "celestial/errors.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

namespace celestial {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc{} || r.ptr != text.data() + text.size())
    throw ValidationError("bad value '" + text + "' for " + key);
  return v;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& s : split_list(text)) out.push_back(parse_number<T>(key, s));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>)
      out += fmt(values[i]);
    else
      out += std::to_string(values[i]);
  }
  return out;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& key, const std::string&)> set;
};

template <typename T, typename Access>
Field number(Access access) {
  return {[access](const RunConfig& c) {
            const auto& v = access(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>)
              return fmt(v);
            else
              return std::to_string(v);
          },
          [access](RunConfig& c, const std::string& key, const std::string& text) {
            access(c) = parse_number<T>(key, text);
          }};
}

template <typename Access>
Field text(Access access) {
  return {[access](const RunConfig& c) { return access(const_cast<RunConfig&>(c)); },
          [access](RunConfig& c, const std::string&, const std::string& t) { access(c) = t; }};
}

void add_train(std::vector<std::pair<std::string, Field>>& f, const std::string& section,
               TrainConfig RunConfig::*member, bool contrastive) {
  auto m = member;
  f.emplace_back(section + ".epochs", number<int>([m](RunConfig& c) -> int& { return (c.*m).epochs; }));
  f.emplace_back(section + ".batch_size", number<int>([m](RunConfig& c) -> int& { return (c.*m).batch_size; }));
  f.emplace_back(section + ".learning_rate",
                 number<double>([m](RunConfig& c) -> double& { return (c.*m).learning_rate; }));
  if (contrastive)
    f.emplace_back(section + ".temperature",
                   number<double>([m](RunConfig& c) -> double& { return (c.*m).temperature; }));
  f.emplace_back(section + ".optimizer", text([m](RunConfig& c) -> std::string& { return (c.*m).optimizer; }));
  f.emplace_back(section + ".momentum", number<double>([m](RunConfig& c) -> double& { return (c.*m).momentum; }));
  f.emplace_back(section + ".seed", number<std::uint64_t>([m](RunConfig& c) -> std::uint64_t& { return (c.*m).seed; }));
}

const std::vector<std::pair<std::string, Field>>& registry() {
  static const auto fields = [] {
    std::vector<std::pair<std::string, Field>> f;
    f.emplace_back("data.manifest", text([](RunConfig& c) -> std::string& { return c.manifest; }));
    f.emplace_back("data.checkpoint", text([](RunConfig& c) -> std::string& { return c.checkpoint; }));
    f.emplace_back("data.embeddings", text([](RunConfig& c) -> std::string& { return c.embeddings; }));
    // The model input size follows the data size.
    f.emplace_back("data.image_height",
                   Field{[](const RunConfig& c) { return std::to_string(c.image_size.height); },
                         [](RunConfig& c, const std::string& k, const std::string& t) {
                           c.image_size.height = c.model.height = parse_number<int>(k, t);
                         }});
    f.emplace_back("data.image_width",
                   Field{[](const RunConfig& c) { return std::to_string(c.image_size.width); },
                         [](RunConfig& c, const std::string& k, const std::string& t) {
                           c.image_size.width = c.model.width = parse_number<int>(k, t);
                         }});

    f.emplace_back("augment.rotations",
                   Field{[](const RunConfig& c) { return join(c.augment.rotations); },
                         [](RunConfig& c, const std::string& k, const std::string& t) {
                           c.augment.rotations = parse_list<int>(k, t);
                         }});
    f.emplace_back("augment.brightness_max_delta",
                   number<double>([](RunConfig& c) -> double& { return c.augment.brightness_max_delta; }));
    f.emplace_back("augment.contrast_max_delta",
                   number<double>([](RunConfig& c) -> double& { return c.augment.contrast_max_delta; }));
    f.emplace_back("augment.seed", number<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.augment.seed; }));

    f.emplace_back("model.conv_blocks",
                   Field{[](const RunConfig& c) { return format_conv_blocks(c.model.conv_blocks); },
                         [](RunConfig& c, const std::string&, const std::string& t) {
                           c.model.conv_blocks = parse_conv_blocks(t);
                         }});
    f.emplace_back("model.embedding_dim", number<int>([](RunConfig& c) -> int& { return c.model.embedding_dim; }));
    f.emplace_back("model.projection_hidden",
                   number<int>([](RunConfig& c) -> int& { return c.model.projection_hidden; }));
    f.emplace_back("model.projection_dim", number<int>([](RunConfig& c) -> int& { return c.model.projection_dim; }));
    f.emplace_back("model.channels", number<int>([](RunConfig& c) -> int& { return c.model.channels; }));

    add_train(f, "pretrain", &RunConfig::pretrain, true);
    f.emplace_back("pretrain.subset", number<double>([](RunConfig& c) -> double& { return c.pretrain_subset; }));
    add_train(f, "finetune", &RunConfig::finetune, false);
    f.emplace_back("finetune.hidden_dim", number<int>([](RunConfig& c) -> int& { return c.head.hidden_dim; }));
    f.emplace_back("finetune.label_fraction", number<double>([](RunConfig& c) -> double& { return c.label_fraction; }));
    f.emplace_back("finetune.split_seed", number<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.split_seed; }));
    add_train(f, "baseline", &RunConfig::baseline, false);

    f.emplace_back("benchmark.fractions",
                   Field{[](const RunConfig& c) { return join(c.fractions); },
                         [](RunConfig& c, const std::string& k, const std::string& t) {
                           c.fractions = parse_list<double>(k, t);
                         }});
    f.emplace_back("benchmark.seeds",
                   Field{[](const RunConfig& c) { return join(c.seeds); },
                         [](RunConfig& c, const std::string& k, const std::string& t) {
                           c.seeds = parse_list<std::uint64_t>(k, t);
                         }});
    f.emplace_back("knn.k_max", number<int>([](RunConfig& c) -> int& { return c.k_max; }));

    f.emplace_back("serve.host", text([](RunConfig& c) -> std::string& { return c.host; }));
    f.emplace_back("serve.port", number<int>([](RunConfig& c) -> int& { return c.port; }));
    f.emplace_back("serve.blend_alpha", number<double>([](RunConfig& c) -> double& { return c.blend_alpha; }));
    f.emplace_back("serve.state_dir", text([](RunConfig& c) -> std::string& { return c.state_dir; }));
    return f;
  }();
  return fields;
}

const Field& field(const std::string& key) {
  for (const auto& [k, f] : registry())
    if (k == key) return f;
  throw ValidationError("unknown configuration key '" + key + "'");
}

}  // namespace

std::string format_conv_blocks(const std::vector<ConvBlockSpec>& blocks) {
  std::string out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    if (i) out += ',';
    out += std::to_string(b.filters) + ':' + std::to_string(b.kernel) + ':' + std::to_string(b.stride) + ':' +
           std::to_string(b.pool);
  }
  return out;
}

std::vector<ConvBlockSpec> parse_conv_blocks(const std::string& text) {
  if (text == "default") return FeaturizerConfig{}.conv_blocks;
  if (text == "desk") return FeaturizerConfig::desk().conv_blocks;
  std::vector<ConvBlockSpec> out;
  for (const auto& item : split_list(text)) {
    std::vector<int> parts;
    std::stringstream ss(item);
    std::string p;
    while (std::getline(ss, p, ':')) parts.push_back(parse_number<int>("model.conv_blocks", p));
    if (parts.size() != 4) throw ValidationError("conv block '" + item + "' must be filters:kernel:stride:pool");
    out.push_back({parts[0], parts[1], parts[2], parts[3]});
  }
  if (out.empty()) throw ValidationError("model.conv_blocks is empty");
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, key, value); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const auto k = [] {
    std::vector<std::string> out;
    for (const auto& [name, f] : registry()) out.push_back(name);
    return out;
  }();
  return k;
}

void RunConfig::merge_ini(std::istream& in) {
  CLI::ConfigINI parser;
  for (const auto& item : parser.from_config(in)) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    std::string value;
    // CLI11 splits comma lists into separate inputs.
    for (std::size_t i = 0; i < item.inputs.size(); ++i) value += (i ? "," : "") + item.inputs[i];
    set(item.fullname(), value);
  }
}

void RunConfig::merge_ini_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open config file " + path.string());
  merge_ini(in);
}

void RunConfig::write_ini(std::ostream& out) const {
  std::string section;
  for (const auto& [key, f] : registry()) {
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      out << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    std::string value = f.get(*this);
    if (value.find_first_of(" \t") != std::string::npos) value = '"' + value + '"';
    out << key.substr(dot + 1) << '=' << value << '\n';
  }
}

BenchmarkConfig RunConfig::benchmark() const {
  BenchmarkConfig b;
  b.fractions = fractions;
  b.seeds = seeds;
  b.head = head;
  b.finetune = finetune;
  b.baseline = baseline;
  b.split_seed = split_seed;
  return b;
}

void RunConfig::validate() const {
  augment.validate();
  model.validate();
  pretrain.validate(true);
  finetune.validate(false);
  baseline.validate(false);
  if (image_size.height != model.height || image_size.width != model.width)
    throw ValidationError("data image size must match the model input size");
  if (!(label_fraction > 0.0 && label_fraction <= 1.0))
    throw ValidationError("finetune.label_fraction must be in (0,1]");
  if (!(pretrain_subset > 0.0 && pretrain_subset <= 1.0))
    throw ValidationError("pretrain.subset must be in (0,1]");
  if (head.hidden_dim <= 0) throw ValidationError("finetune.hidden_dim must be positive");
  if (k_max < 1) throw ValidationError("knn.k_max must be positive");
  if (!(blend_alpha >= 0.0 && blend_alpha <= 1.0)) throw ValidationError("serve.blend_alpha must be in [0,1]");
}

}  // namespace celestial
