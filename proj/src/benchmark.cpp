#include "celestial/benchmark.hpp"

#include "celestial/checkpoint.hpp"
#include "celestial/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

namespace celestial {

using nlohmann::ordered_json;

ImageSet with_benchmark_split(const ImageSet& data, std::uint64_t split_seed) {
  const bool has_test = std::any_of(data.manifest.entries.begin(), data.manifest.entries.end(),
                                    [](const ManifestEntry& e) { return e.split == Split::Test; });
  if (has_test) return data;
  ImageSet out = data;
  out.manifest = stratified_train_test(data.manifest, 0.8, split_seed);
  return out;
}

std::string cell_file_name(double fraction, std::uint64_t seed) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "cell_p%.6f_s%llu.json", fraction, static_cast<unsigned long long>(seed));
  return buf;
}

namespace {

ordered_json cell_json(const BenchmarkCell& c) {
  ordered_json j;
  j["fraction"] = c.fraction;
  j["seed"] = c.seed;
  j["ssl_accuracy"] = c.ssl_accuracy;
  j["baseline_accuracy"] = c.baseline_accuracy;
  j["labeled_count"] = c.labeled_count;
  return j;
}

BenchmarkCell cell_from_json(const ordered_json& j) {
  return {j.at("fraction"), j.at("seed"), j.at("ssl_accuracy"), j.at("baseline_accuracy"),
          j.at("labeled_count")};
}

std::string config_digest(const BenchmarkConfig& c) {
  ordered_json j;
  j["head_hidden"] = c.head.hidden_dim;
  for (const auto* t : {&c.finetune, &c.baseline}) {
    j["train"].push_back({{"epochs", t->epochs},
                          {"batch_size", t->batch_size},
                          {"learning_rate", t->learning_rate},
                          {"optimizer", t->optimizer},
                          {"momentum", t->momentum}});
  }
  j["split_seed"] = c.split_seed;
  const std::string s = j.dump();
  return content_digest(std::vector<std::uint8_t>(s.begin(), s.end()));
}

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace

BenchmarkCell run_benchmark_cell(const ImageSet& data, const FeaturizerModel& featurizer,
                                 const BenchmarkConfig& config, double fraction, std::uint64_t seed) {
  const auto split = label_fraction_split(data.manifest, fraction, seed);
  TrainConfig ft = config.finetune;
  ft.seed = seed;
  TrainConfig bl = config.baseline;
  bl.seed = seed;
  const auto ssl = finetune(featurizer, data, split, config.head, ft);
  const auto base = train_supervised_baseline(data, split, featurizer.config, config.head, bl);
  return {fraction, seed, evaluate_accuracy(ssl.model, data, Split::Test),
          evaluate_accuracy(base.model, data, Split::Test), split.labeled_count()};
}

EfficiencyReport label_efficiency_benchmark(const ImageSet& input, const FeaturizerModel& featurizer,
                                            const BenchmarkConfig& config, const CellCallback& on_cell) {
  if (featurizer.has_projection())
    throw ValidationError("benchmark requires a featurizer stripped of its projection head");
  if (config.fractions.empty() || config.seeds.empty())
    throw ValidationError("benchmark needs at least one fraction and one seed");
  std::vector<double> fractions = config.fractions;
  std::sort(fractions.begin(), fractions.end());
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] > 0.0 && fractions[i] <= 1.0)) throw ValidationError("fractions must be in (0,1]");
    if (i && fractions[i] == fractions[i - 1]) throw ValidationError("duplicate fraction");
  }

  const ImageSet data = with_benchmark_split(input, config.split_seed);
  EfficiencyReport report;
  report.seeds = config.seeds;
  report.split_seed = config.split_seed;
  report.featurizer_digest = content_digest(serialize_checkpoint(featurizer));
  report.config_digest = config_digest(config);
  report.num_classes = data.manifest.num_classes();
  for (const auto& e : data.manifest.entries) (e.split == Split::Train ? report.train_count : report.test_count)++;

  if (config.cell_dir) std::filesystem::create_directories(*config.cell_dir);
  for (double p : fractions) {
    EfficiencyRow row;
    row.fraction = p;
    for (auto seed : config.seeds) {
      BenchmarkCell cell;
      bool resumed = false;
      std::filesystem::path file;
      if (config.cell_dir) {
        file = *config.cell_dir / cell_file_name(p, seed);
        if (std::filesystem::exists(file)) {
          std::ifstream in(file);
          auto j = ordered_json::parse(in);
          if (j.value("config_digest", "") == report.config_digest &&
              j.value("featurizer_digest", "") == report.featurizer_digest) {
            cell = cell_from_json(j);
            resumed = true;
          }
        }
      }
      if (!resumed) {
        try {
          cell = run_benchmark_cell(data, featurizer, config, p, seed);
        } catch (const Error& e) {
          std::ostringstream msg;
          msg << "benchmark cell (p=" << p << ", seed=" << seed << "): " << e.what();
          throw TrainingError(msg.str());
        }
        if (config.cell_dir) {
          auto j = cell_json(cell);
          j["config_digest"] = report.config_digest;
          j["featurizer_digest"] = report.featurizer_digest;
          const std::string text = j.dump(2) + "\n";
          write_file_bytes(file, std::vector<std::uint8_t>(text.begin(), text.end()));
        }
      }
      if (on_cell) on_cell(cell, resumed);
      row.cells.push_back(cell);
    }
    std::vector<double> ssl, base, count;
    for (const auto& c : row.cells) {
      ssl.push_back(c.ssl_accuracy);
      base.push_back(c.baseline_accuracy);
      count.push_back(static_cast<double>(c.labeled_count));
    }
    std::tie(row.ssl_mean, row.ssl_sd) = mean_sd(ssl);
    std::tie(row.baseline_mean, row.baseline_sd) = mean_sd(base);
    row.labeled_count = mean_sd(count).first;
    report.rows.push_back(std::move(row));
  }
  return report;
}

void EfficiencyReport::write_csv(std::ostream& out) const {
  out << "fraction,labeled_count,ssl_accuracy_mean,ssl_accuracy_sd,baseline_accuracy_mean,baseline_accuracy_sd\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f,%.2f,%.6f,%.6f,%.6f,%.6f\n", r.fraction, r.labeled_count,
                  r.ssl_mean, r.ssl_sd, r.baseline_mean, r.baseline_sd);
    out << buf;
  }
}

void EfficiencyReport::write_metadata(std::ostream& out) const {
  ordered_json j;
  j["seeds"] = seeds;
  j["split_seed"] = split_seed;
  j["split_protocol"] = "stratified 80/20 per class unless the manifest tags test entries";
  j["featurizer_digest"] = featurizer_digest;
  j["config_digest"] = config_digest;
  j["train_count"] = train_count;
  j["test_count"] = test_count;
  j["num_classes"] = num_classes;
  j["cells"] = ordered_json::array();
  for (const auto& r : rows)
    for (const auto& c : r.cells) j["cells"].push_back(cell_json(c));
  out << j.dump(2) << '\n';
}

}  // namespace celestial
