// epinet command-line driver: train, eval, gradcheck, export-filters.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <epinet/epinet.hpp>

namespace fs = std::filesystem;
using namespace epinet;

namespace {

constexpr int kRuntimeError = 1;
constexpr int kUsageError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string data_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("EPINET_DATA"); env && *env) return env;
  throw UsageError("no data directory: pass --data or set EPINET_DATA");
}

const char* kMeanFile = "train_mean.txt";

void write_mean(const std::string& dir, const std::vector<float>& mean) {
  std::ofstream f(fs::path(dir) / kMeanFile);
  char buf[32];
  for (float m : mean) {
    std::snprintf(buf, sizeof buf, "%.9g\n", static_cast<double>(m));
    f << buf;
  }
  if (!f) throw DataError("cannot write " + (fs::path(dir) / kMeanFile).string());
}

std::optional<std::vector<float>> read_mean(const std::string& checkpoint) {
  const auto path = fs::path(checkpoint).parent_path() / kMeanFile;
  std::ifstream f(path);
  if (!f) return std::nullopt;
  std::vector<float> mean;
  float v;
  while (f >> v) mean.push_back(v);
  return mean;
}

struct Splits {
  Dataset train, test;
};

// `limit` keeps the first N training images; the mean comes from those.
Splits load_data(const std::string& dir, std::size_t limit, std::size_t classes) {
  const auto kind = detect_kind(dir);
  Splits s{load_split(dir, kind, "train").head(limit), load_split(dir, kind, "test")};
  if (classes != s.train.classes)
    throw DataError("network has " + std::to_string(classes) + " classes, dataset has " +
                    std::to_string(s.train.classes));
  const auto mean = preprocess(s.train);
  subtract_mean(s.test, mean);
  return s;
}

struct TrainFlags {
  std::string config, data, out, resume, schedule;
  std::size_t epochs = 20, batch = 128, limit = 0, crop = 0;
  std::optional<std::uint64_t> seed;
  double lr = 0.01, momentum = 0.9, wd = 5e-4;
  bool flip = false;
};

int cmd_train(const TrainFlags& f) {
  const auto cfg = load_config(f.config);
  TrainOptions opt;
  opt.epochs = f.epochs;
  opt.seed = f.seed.value_or(cfg.seed);
  opt.sgd.lr = f.lr;
  opt.sgd.momentum = f.momentum;
  opt.sgd.weight_decay = f.wd;
  opt.sgd.batch_size = f.batch;
  if (!f.schedule.empty()) opt.sgd.schedule = parse_schedule(f.schedule);
  opt.sgd.validate();
  opt.augment = {f.crop, f.flip};
  opt.out_dir = f.out;
  opt.resume = f.resume;
  auto data = load_data(data_dir(f.data), f.limit, cfg.classes);
  fs::create_directories(f.out);
  write_mean(f.out, data.train.mean);
  std::printf("%s,seconds\n", kTrainLogHeader);
  opt.on_epoch = [](const EpochRecord& r) {
    std::printf("%s,%.1f\n", format_record(r).c_str(), r.seconds);
    std::fflush(stdout);
  };
  run_training(cfg, data.train, data.test, opt);
  return 0;
}

struct EvalFlags {
  std::string checkpoint, config, data, split = "test";
  std::size_t limit = 0, crop = 0;
};

int cmd_eval(const EvalFlags& f) {
  const auto cfg = load_config(f.config);
  auto loaded = load_checkpoint(f.checkpoint, cfg);
  const std::string dir = data_dir(f.data);
  const auto kind = detect_kind(dir);
  Dataset ds;
  if (const auto mean = read_mean(f.checkpoint)) {
    ds = load_split(dir, kind, f.split);
    if (f.split == "train") ds = ds.head(f.limit);
    subtract_mean(ds, *mean);
  } else {
    auto splits = load_data(dir, f.limit, cfg.classes);
    ds = f.split == "train" ? std::move(splits.train) : std::move(splits.test);
  }
  const double err = evaluate(loaded.net, ds, AugmentSpec{f.crop, false});
  std::printf("split=%s images=%zu val_error_top1=%.6f\n", f.split.c_str(), ds.size(), err);
  return 0;
}

struct GradFlags {
  std::string config, csv;
  std::uint64_t seed = 1;
  std::size_t instances = 20, max_per_block = 0;
  bool verbose = false;
};

int cmd_gradcheck(const GradFlags& f) {
  std::optional<NetworkConfig> cfg;
  if (!f.config.empty()) cfg = load_config(f.config);
  GradCheckOptions opt;
  opt.max_per_block = f.max_per_block;
  opt.sample_seed = f.seed;
  const auto suite = run_gradcheck_suite(f.seed, f.instances, cfg ? &*cfg : nullptr, opt);
  bool all = true;
  std::ofstream csv;
  if (!f.csv.empty()) {
    csv.open(f.csv, std::ios::trunc);
    if (!csv) throw Error("cannot write '" + f.csv + "'");
    csv << GradCheckReport::csv_header();
  }
  for (const auto& e : suite) {
    std::printf("%s %-14s %zu/%zu  max_rel_err=%.3e  %.2fs\n", e.pass() ? "PASS" : "FAIL", e.name.c_str(), e.passed,
                e.instances, e.max_rel_error, e.seconds);
    for (const auto& r : e.reports) {
      if (!r.pass || f.verbose) std::fputs(r.text().c_str(), stdout);
      if (csv.is_open()) csv << r.csv_rows();
    }
    all = all && e.pass();
  }
  std::printf("%s\n", all ? "all gradient checks passed" : "gradient check FAILED");
  return all ? 0 : kRuntimeError;
}

struct ExportFlags {
  std::string checkpoint, config, layer = "0", out;
};

int cmd_export(const ExportFlags& f) {
  Tensor<float> weights;
  if (!f.config.empty()) {
    auto loaded = load_checkpoint(f.checkpoint, load_config(f.config));
    weights = layer_weights(loaded.net, f.layer);
  } else {
    // Without a config the layer must be named; its weights are read directly.
    const auto data = read_checkpoint(f.checkpoint);
    const auto it = std::find_if(data.params.begin(), data.params.end(),
                                 [&](const StoredTensor& t) { return t.name == f.layer + ".weights"; });
    if (it == data.params.end())
      throw Error("checkpoint has no filters for layer '" + f.layer + "' (pass --config to select by index)");
    if (it->dims.size() != 4) throw Error("layer '" + f.layer + "' has no filters to export");
    weights = Tensor<float>(Shape{it->dims[0], it->dims[1], it->dims[2], it->dims[3]});
    std::copy(it->data.begin(), it->data.end(), weights.data());
  }
  const auto img = render_filter_grid(weights);
  write_ppm(f.out, img);
  std::printf("wrote %s (%zux%zu, %zu tiles)\n", f.out.c_str(), img.width, img.height, weights.shape().n);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Epitomic convolutional networks: train, evaluate, gradient-check, export filters"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads for the matrix kernels (results do not depend on it)")
      ->check(CLI::Range(1, 256));

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Train a network with momentum SGD");
  train->add_option("--config", tf.config, "Network config file")->required()->check(CLI::ExistingFile);
  train->add_option("--data", tf.data, "Directory with MNIST IDX or CIFAR-10 binary files (default: $EPINET_DATA)");
  train->add_option("--epochs", tf.epochs, "Epochs to train")->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--seed", tf.seed, "Seed for init, dropout, shuffling and augmentation (default: config seed)");
  train->add_option("--out", tf.out, "Output directory for train_log.csv and checkpoints")->required();
  train->add_option("--lr", tf.lr, "Learning rate")->capture_default_str();
  train->add_option("--momentum", tf.momentum, "Momentum")->capture_default_str();
  train->add_option("--wd", tf.wd, "Weight decay")->capture_default_str();
  train->add_option("--batch", tf.batch, "Minibatch size")->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--schedule", tf.schedule, "Learning-rate steps, e.g. 10:0.1,15:0.1");
  train->add_option("--resume", tf.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_option("--limit", tf.limit, "Use only the first N training images (0 = all)");
  train->add_option("--crop", tf.crop, "Random crop side during training, center crop at evaluation (0 = none)");
  train->add_flag("--flip", tf.flip, "Random horizontal flips during training");
  train->add_option("--threads", threads, "Worker threads")->check(CLI::Range(1, 256));

  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "Top-1 error of a checkpoint");
  eval->add_option("--checkpoint", ef.checkpoint, "Checkpoint file")->required();
  eval->add_option("--config", ef.config, "Network config file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", ef.data, "Data directory (default: $EPINET_DATA)");
  eval->add_option("--split", ef.split, "train or test")->capture_default_str()->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--limit", ef.limit, "First N images of the train split (0 = all)");
  eval->add_option("--crop", ef.crop, "Center crop side (0 = none)");
  eval->add_option("--threads", threads, "Worker threads")->check(CLI::Range(1, 256));

  GradFlags gf;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every layer and, with --config, a network");
  grad->add_option("--config", gf.config, "Network config for the end-to-end check")->check(CLI::ExistingFile);
  grad->add_option("--seed", gf.seed, "Seed for the random instances")->capture_default_str();
  grad->add_option("--instances", gf.instances, "Instances per layer type")->capture_default_str()->check(CLI::PositiveNumber);
  grad->add_option("--max-per-block", gf.max_per_block, "Check at most N random elements per block (0 = all)");
  grad->add_option("--csv", gf.csv, "Write per-block results as CSV");
  grad->add_flag("-v,--verbose", gf.verbose, "Print every report, not only failures");

  ExportFlags xf;
  auto* exp = app.add_subcommand("export-filters", "Write a layer's filters or epitomes as a PPM grid");
  exp->add_option("--checkpoint", xf.checkpoint, "Checkpoint file")->required();
  exp->add_option("--config", xf.config, "Network config (needed to select a layer by index)")->check(CLI::ExistingFile);
  exp->add_option("--layer", xf.layer, "Layer name or 0-based index")->capture_default_str();
  exp->add_option("--out", xf.out, "Output .ppm path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    const CLI::App* sub = &app;
    for (const auto* s : app.get_subcommands()) sub = s;
    std::cerr << "error: " << e.what() << "\n\n" << sub->help();
    return kUsageError;
  }
  kernel_threads() = threads;
  try {
    if (*train) return cmd_train(tf);
    if (*eval) return cmd_eval(ef);
    if (*grad) return cmd_gradcheck(gf);
    if (*exp) return cmd_export(xf);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << app.help();
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
