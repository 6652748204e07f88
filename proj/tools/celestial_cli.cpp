// celestial: pretrain, evaluate, fine-tune, benchmark and serve image featurizers.
#include "celestial/benchmark.hpp"
#include "celestial/checkpoint.hpp"
#include "celestial/config.hpp"
#include "celestial/dataset.hpp"
#include "celestial/errors.hpp"
#include "celestial/http.hpp"
#include "celestial/index.hpp"
#include "celestial/service.hpp"
#include "celestial/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <pthread.h>
#include <thread>

namespace fs = std::filesystem;
using namespace celestial;

namespace {

// Usage and validation problems exit 2; everything else that fails exits 1.
class UsageError : public Error {
 public:
  using Error::Error;
};

struct Invocation {
  std::string config_file;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;  // key, value in flag order
  std::string out;
};

void add_common(CLI::App* sub, Invocation& inv) {
  sub->add_option("--config", inv.config_file, "INI file with run settings")->check(CLI::ExistingFile);
  sub->add_option("--set", inv.sets, "Override a setting: section.key=value (repeatable)");
  sub->add_option("--out", inv.out, "Output directory (default: $CELESTIAL_OUT or ./runs, timestamped)");
}

// A flag that writes one or more config keys.
void add_key_flag(CLI::App* sub, Invocation& inv, const std::string& name, std::vector<std::string> keys,
                  const std::string& help) {
  sub->add_option_function<std::string>(
      name,
      [&inv, keys](const std::string& v) {
        for (const auto& k : keys) inv.flags.emplace_back(k, v);
      },
      help);
}

RunConfig resolve(const Invocation& inv) {
  RunConfig c;
  try {
    if (!inv.config_file.empty()) c.merge_ini_file(inv.config_file);
    for (const auto& s : inv.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ValidationError("--set expects section.key=value, got '" + s + "'");
      c.set(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [k, v] : inv.flags) c.set(k, v);
    c.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  return c;
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw UsageError(flag + " is required");
}

fs::path output_dir(const Invocation& inv, const std::string& command) {
  fs::path dir;
  if (!inv.out.empty()) {
    dir = inv.out;
  } else {
    const char* root = std::getenv("CELESTIAL_OUT");
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream name;
    name << command << '-' << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
    dir = fs::path(root ? root : "runs") / name.str();
  }
  fs::create_directories(dir);
  return dir;
}

void write_config(const RunConfig& c, const fs::path& dir) {
  std::ofstream out(dir / "config.ini");
  c.write_ini(out);
}

DatasetManifest load_data_manifest(const RunConfig& c, ImageSize size) {
  require(c.manifest, "--manifest");
  try {
    return load_manifest(c.manifest, size);
  } catch (const NotFoundError& e) {
    throw UsageError(e.what());
  }
}

FeaturizerModel load_stripped(const RunConfig& c) {
  require(c.checkpoint, "--checkpoint");
  FeaturizerModel m = load_featurizer(c.checkpoint);
  if (m.has_projection()) m = strip_projection(std::move(m));
  return m;
}

EpochCallback progress(const std::string& what, std::ofstream& metrics) {
  return [&metrics, what](const EpochRecord& r) {
    nlohmann::json j{{"epoch", r.epoch}, {"loss", r.mean_loss}, {"seconds", r.seconds}};
    for (const auto& [k, v] : r.metrics) j["metrics"][k] = v;
    metrics << j.dump() << '\n';
    metrics.flush();
    std::cerr << what << " epoch " << r.epoch << " loss " << std::setprecision(6) << r.mean_loss << " ("
              << std::setprecision(3) << r.seconds << " s)\n";
  };
}

int cmd_synth(int classes, int per_class, int size, std::uint64_t seed, double test_fraction, const Invocation& inv) {
  if (classes < 2 || per_class < 1 || size < 8) throw UsageError("need --classes >= 2, --per-class >= 1, --size >= 8");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw UsageError("--test-fraction must be in [0,1)");
  const fs::path dir = output_dir(inv, "synth");
  ImageSet set = make_synthetic_dataset(classes, per_class, {size, size}, seed);
  if (test_fraction > 0.0) set.manifest = stratified_train_test(set.manifest, 1.0 - test_fraction, seed);
  const auto path = write_image_set(set, dir);
  std::cout << path.string() << '\n';
  return 0;
}

int cmd_pretrain(const Invocation& inv) {
  const RunConfig c = resolve(inv);
  const DatasetManifest manifest = load_data_manifest(c, c.image_size);
  const fs::path dir = output_dir(inv, "pretrain");
  write_config(c, dir);

  ImageSet data = select_split(decode_all(manifest, c.image_size), Split::Train);
  if (c.pretrain_subset < 1.0) data = subsample(data, c.pretrain_subset, c.pretrain.seed);
  std::cerr << "pretraining on " << data.size() << " unlabeled images, " << c.model.parameter_count()
            << " parameters\n";
  std::ofstream metrics(dir / "metrics.jsonl");
  auto result = pretrain(data, build_featurizer(c.model, c.pretrain.seed), c.augment, c.pretrain,
                         progress("pretrain", metrics));
  save_checkpoint(result.model, dir / "featurizer_full.ckpt");
  save_checkpoint(strip_projection(std::move(result.model)), dir / "featurizer.ckpt");
  std::cout << (dir / "featurizer.ckpt").string() << '\n';
  return 0;
}

EmbeddingIndex labeled_index(const RunConfig& c) {
  if (!c.embeddings.empty()) return read_embedding_dump(c.embeddings);
  const FeaturizerModel m = load_stripped(c);
  DatasetManifest manifest = load_data_manifest(c, {m.config.height, m.config.width});
  std::erase_if(manifest.entries, [](const ManifestEntry& e) { return !e.label; });
  return index_corpus(m, manifest);
}

int cmd_knn_eval(const Invocation& inv) {
  const RunConfig c = resolve(inv);
  if (c.embeddings.empty()) require(c.checkpoint, "--checkpoint or --embeddings");
  EmbeddingIndex index = labeled_index(c);
  KnnReport report;
  try {
    report = kth_neighbor_accuracy(index, c.k_max);
  } catch (const ValidationError& e) {
    throw UsageError(e.what());
  }
  report.seed = c.pretrain.seed;
  const fs::path dir = output_dir(inv, "knn-eval");
  write_config(c, dir);
  std::ofstream out(dir / "knn.csv");
  report.write_csv(out);
  report.write_csv(std::cout);
  return 0;
}

ImageSet benchmark_data(const RunConfig& c, const FeaturizerModel& m) {
  const DatasetManifest manifest = load_data_manifest(c, {m.config.height, m.config.width});
  return with_benchmark_split(decode_all(manifest, manifest.image_size), c.split_seed);
}

int cmd_finetune(const Invocation& inv) {
  const RunConfig c = resolve(inv);
  const FeaturizerModel featurizer = load_stripped(c);
  const ImageSet data = benchmark_data(c, featurizer);
  const fs::path dir = output_dir(inv, "finetune");
  write_config(c, dir);

  const auto split = label_fraction_split(data.manifest, c.label_fraction, c.finetune.seed);
  std::ofstream metrics(dir / "metrics.jsonl");
  auto result = finetune(featurizer, data, split, c.head, c.finetune, progress("finetune", metrics));
  const double accuracy = evaluate_accuracy(result.model, data, Split::Test);
  save_checkpoint(result.model, dir / "classifier.ckpt");
  nlohmann::json summary{{"fraction", c.label_fraction},
                         {"labeled", split.labeled_count()},
                         {"test_accuracy", accuracy},
                         {"featurizer_digest", content_digest(serialize_checkpoint(featurizer))}};
  std::ofstream(dir / "result.json") << summary.dump(2) << '\n';
  std::cout << "test accuracy " << accuracy << " with " << split.labeled_count() << " labels\n";
  return 0;
}

int cmd_benchmark(const Invocation& inv) {
  const RunConfig c = resolve(inv);
  const FeaturizerModel featurizer = load_stripped(c);
  const ImageSet data = benchmark_data(c, featurizer);
  const fs::path dir = output_dir(inv, "benchmark");
  write_config(c, dir);

  BenchmarkConfig b = c.benchmark();
  b.cell_dir = dir / "cells";
  const auto report = label_efficiency_benchmark(data, featurizer, b, [](const BenchmarkCell& cell, bool resumed) {
    std::cerr << "p=" << cell.fraction << " seed=" << cell.seed << (resumed ? " (resumed)" : "")
              << " ssl=" << cell.ssl_accuracy << " baseline=" << cell.baseline_accuracy << '\n';
  });
  {
    std::ofstream out(dir / "efficiency.csv");
    report.write_csv(out);
  }
  {
    std::ofstream out(dir / "efficiency.json");
    report.write_metadata(out);
  }
  report.write_csv(std::cout);
  return 0;
}

int cmd_embed_dump(const Invocation& inv) {
  const RunConfig c = resolve(inv);
  const FeaturizerModel featurizer = load_stripped(c);
  const DatasetManifest manifest = load_data_manifest(c, {featurizer.config.height, featurizer.config.width});
  const fs::path dir = output_dir(inv, "embed-dump");
  write_config(c, dir);
  write_embedding_dump(index_corpus(featurizer, manifest), dir / "embeddings.bin");
  std::cout << (dir / "embeddings.bin").string() << '\n';
  return 0;
}

int cmd_serve(const Invocation& inv) {
  const RunConfig c = resolve(inv);
  const auto ckpt_bytes = [&] {
    require(c.checkpoint, "--checkpoint");
    return read_file_bytes(c.checkpoint);
  }();
  FeaturizerModel featurizer = load_stripped(c);
  const DatasetManifest corpus = load_data_manifest(c, {featurizer.config.height, featurizer.config.width});
  const fs::path dir = output_dir(inv, "serve");
  write_config(c, dir);

  ServiceConfig sc;
  sc.blend_alpha = c.blend_alpha;
  sc.state_dir = c.state_dir.empty() ? dir / "state" : fs::path(c.state_dir);
  std::cerr << "indexing " << corpus.size() << " images\n";
  EmbeddingIndex index = index_corpus(featurizer, corpus);

  // Block termination signals so every thread inherits the mask; one thread
  // waits for them and stops the server.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  SearchService service(std::move(featurizer), corpus, std::move(index), sc, content_digest(ckpt_bytes));
  HttpServer server(service);
  const int port = server.bind(c.host, c.port);
  std::cout << "listening on http://" << c.host << ':' << port << std::endl;
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    server.stop();
  });
  server.serve();
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised featurizer pretraining, evaluation and search"};
  app.require_subcommand(1);
  Invocation inv;

  int classes = 8, per_class = 100, size = 64;
  std::uint64_t synth_seed = 42;
  double test_fraction = 0.2;
  auto* synth = app.add_subcommand("synth", "Write a synthetic texture dataset with a manifest");
  synth->add_option("--classes", classes, "Number of classes")->capture_default_str();
  synth->add_option("--per-class", per_class, "Images per class")->capture_default_str();
  synth->add_option("--size", size, "Image side length")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
  synth->add_option("--test-fraction", test_fraction, "Stratified test share (0 tags everything train)")
      ->capture_default_str();
  synth->add_option("--out", inv.out, "Output directory");

  auto* pre = app.add_subcommand("pretrain", "Contrastive pretraining on the unlabeled train split");
  add_common(pre, inv);
  add_key_flag(pre, inv, "--manifest", {"data.manifest"}, "Dataset manifest");
  add_key_flag(pre, inv, "--epochs", {"pretrain.epochs"}, "Epochs");
  add_key_flag(pre, inv, "--batch-size", {"pretrain.batch_size"}, "Pairs per batch");
  add_key_flag(pre, inv, "--lr", {"pretrain.learning_rate"}, "Learning rate");
  add_key_flag(pre, inv, "--temperature", {"pretrain.temperature"}, "NT-Xent temperature");
  add_key_flag(pre, inv, "--seed", {"pretrain.seed", "augment.seed"}, "Initialization, shuffle and augmentation seed");
  add_key_flag(pre, inv, "--subset", {"pretrain.subset"}, "Fraction of the train split to use");
  add_key_flag(pre, inv, "--conv-blocks", {"model.conv_blocks"},
               "Backbone blocks filters:kernel:stride:pool,... or 'default' / 'desk'");

  auto* knn = app.add_subcommand("knn-eval", "k-th nearest neighbor accuracy of the embedding space");
  add_common(knn, inv);
  add_key_flag(knn, inv, "--manifest", {"data.manifest"}, "Dataset manifest (labeled entries are evaluated)");
  add_key_flag(knn, inv, "--checkpoint", {"data.checkpoint"}, "Featurizer checkpoint");
  add_key_flag(knn, inv, "--embeddings", {"data.embeddings"}, "Embedding dump instead of checkpoint + manifest");
  add_key_flag(knn, inv, "--k-max", {"knn.k_max"}, "Largest k");

  auto* fin = app.add_subcommand("finetune", "Train a classifier head over the frozen featurizer");
  add_common(fin, inv);
  add_key_flag(fin, inv, "--manifest", {"data.manifest"}, "Dataset manifest");
  add_key_flag(fin, inv, "--checkpoint", {"data.checkpoint"}, "Featurizer checkpoint");
  add_key_flag(fin, inv, "--fraction", {"finetune.label_fraction"}, "Share of train labels exposed");
  add_key_flag(fin, inv, "--epochs", {"finetune.epochs"}, "Epochs");
  add_key_flag(fin, inv, "--lr", {"finetune.learning_rate"}, "Learning rate");
  add_key_flag(fin, inv, "--seed", {"finetune.seed"}, "Label split and head seed");

  auto* bench = app.add_subcommand("benchmark", "Label-efficiency benchmark against a supervised baseline");
  add_common(bench, inv);
  add_key_flag(bench, inv, "--manifest", {"data.manifest"}, "Dataset manifest");
  add_key_flag(bench, inv, "--checkpoint", {"data.checkpoint"}, "Featurizer checkpoint");
  add_key_flag(bench, inv, "--fractions", {"benchmark.fractions"}, "Comma-separated label fractions");
  add_key_flag(bench, inv, "--seeds", {"benchmark.seeds"}, "Comma-separated seeds");

  auto* dump = app.add_subcommand("embed-dump", "Write embeddings of every manifest image");
  add_common(dump, inv);
  add_key_flag(dump, inv, "--manifest", {"data.manifest"}, "Dataset manifest");
  add_key_flag(dump, inv, "--checkpoint", {"data.checkpoint"}, "Featurizer checkpoint");

  auto* serve = app.add_subcommand("serve", "Interactive similarity search with relevance feedback");
  add_common(serve, inv);
  add_key_flag(serve, inv, "--manifest", {"data.manifest"}, "Corpus manifest");
  add_key_flag(serve, inv, "--checkpoint", {"data.checkpoint"}, "Featurizer checkpoint");
  add_key_flag(serve, inv, "--host", {"serve.host"}, "Bind address");
  add_key_flag(serve, inv, "--port", {"serve.port"}, "Port (0 picks a free one)");
  add_key_flag(serve, inv, "--blend-alpha", {"serve.blend_alpha"}, "Weight of the relevance head in ranking");
  add_key_flag(serve, inv, "--state-dir", {"serve.state_dir"}, "Event log and snapshot directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(classes, per_class, size, synth_seed, test_fraction, inv);
    if (pre->parsed()) return cmd_pretrain(inv);
    if (knn->parsed()) return cmd_knn_eval(inv);
    if (fin->parsed()) return cmd_finetune(inv);
    if (bench->parsed()) return cmd_benchmark(inv);
    if (dump->parsed()) return cmd_embed_dump(inv);
    if (serve->parsed()) return cmd_serve(inv);
  } catch (const UsageError& e) {
    const auto subs = app.get_subcommands();
    std::cerr << "error: " << e.what() << "\n\n" << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
