#pragma once

// Minibatch SGD driver with per-epoch evaluation, CSV logging and
// checkpointing. Every random draw comes from a stream keyed by the seed and
// the epoch, so a run resumed from an epoch checkpoint retraces the
// uninterrupted run exactly.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "data.hpp"
#include "network.hpp"

namespace epinet {

struct EpochRecord {
  std::size_t epoch = 0;  // epochs completed
  std::size_t step = 0;   // minibatches completed
  double lr = 0.0;
  double train_loss = 0.0;
  double val_error = 0.0;
  double seconds = 0.0;
};

struct TrainOptions {
  std::size_t epochs = 20;
  SgdConfig sgd;
  std::uint64_t seed = 1;
  AugmentSpec augment;
  std::string out_dir;          // empty: no log file, no checkpoints
  std::string resume;           // checkpoint to continue from
  bool epoch_checkpoints = true;
  std::size_t eval_batch = 256;
  std::function<void(const EpochRecord&)> on_epoch;
  /// Checked after each epoch; returning true ends training there.
  std::function<bool(const EpochRecord&)> stop;
};

struct TrainResult {
  Network<float> net;
  SgdOptimizer<float> optimizer;
  std::vector<EpochRecord> log;  // epochs run in this call
};

inline std::string format_record(const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.8g,%.6f,%.6f", r.epoch, r.step, r.lr, r.train_loss, r.val_error);
  return buf;
}

inline const char* kTrainLogHeader = "epoch,step,lr,train_loss,val_error_top1";

inline std::vector<EpochRecord> read_train_log(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open training log '" + path + "'");
  std::string line;
  std::getline(f, line);
  if (line != kTrainLogHeader) throw DataError("'" + path + "' is not a training log");
  std::vector<EpochRecord> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    EpochRecord r;
    char comma;
    std::istringstream is(line);
    if (!(is >> r.epoch >> comma >> r.step >> comma >> r.lr >> comma >> r.train_loss >> comma >> r.val_error))
      throw DataError("malformed training log line: " + line);
    out.push_back(r);
  }
  return out;
}

/// Top-1 error in [0, 1] on the center-cropped (or full) images.
inline double evaluate(Network<float>& net, const Dataset& ds, const AugmentSpec& augment = {},
                       std::size_t batch = 256) {
  if (ds.size() == 0) throw DataError("cannot evaluate on an empty dataset");
  AugmentSpec eval_spec{augment.crop, false};
  std::size_t wrong = 0;
  std::vector<std::size_t> idx;
  for (std::size_t lo = 0; lo < ds.size(); lo += batch) {
    idx.clear();
    for (std::size_t i = lo; i < std::min(ds.size(), lo + batch); ++i) idx.push_back(i);
    const auto b = make_batch<float>(ds, idx, eval_spec, nullptr);
    const auto pred = net.predict(b.images);
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != b.labels[i];
  }
  return static_cast<double>(wrong) / static_cast<double>(ds.size());
}

inline std::string epoch_checkpoint_path(const std::string& dir, std::size_t epoch) {
  return (std::filesystem::path(dir) / ("epoch-" + std::to_string(epoch) + ".ckpt")).string();
}

/// Trains `cfg` on `train`, evaluating on `val` after every epoch.
inline TrainResult run_training(const NetworkConfig& cfg, const Dataset& train, const Dataset& val,
                                const TrainOptions& opt) {
  opt.sgd.validate();
  if (train.size() == 0) throw DataError("training set is empty");
  Network<float> net(cfg, opt.seed);
  SgdOptimizer<float> sgd(net, opt.sgd);
  std::size_t start = 0;
  if (!opt.resume.empty()) {
    const auto ck = read_checkpoint(opt.resume);
    restore(ck, net, &sgd);
    start = ck.epoch;
  }
  const std::size_t bs = opt.sgd.batch_size;
  const std::size_t batches = (train.size() + bs - 1) / bs;

  std::ofstream log;
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    const auto path = (std::filesystem::path(opt.out_dir) / "train_log.csv").string();
    std::vector<EpochRecord> kept;
    if (start > 0 && std::filesystem::exists(path))
      for (const auto& r : read_train_log(path))
        if (r.epoch <= start) kept.push_back(r);
    log.open(path, std::ios::trunc);
    if (!log) throw DataError("cannot write '" + path + "'");
    log << kTrainLogHeader << "\n";
    for (const auto& r : kept) log << format_record(r) << "\n";
    log.flush();
  }

  TrainResult res{std::move(net), std::move(sgd), {}};
  std::size_t done = start;
  std::vector<std::size_t> idx;
  for (std::size_t epoch = start; epoch < opt.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng order_rng = Rng::stream(opt.seed, 1000 + epoch);
    Rng augment_rng = Rng::stream(opt.seed, 2000 + epoch);
    const auto order = shuffled_indices(train.size(), order_rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * bs, hi = std::min(train.size(), lo + bs);
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi));
      const auto batch = make_batch<float>(train, idx, opt.augment, &augment_rng);
      const auto fwd = res.net.forward(batch.images, batch.labels, Mode::train);
      if (!std::isfinite(fwd.loss)) throw NumericError("training loss became non-finite in epoch " + std::to_string(epoch + 1));
      res.net.backward();
      res.optimizer.step(res.net, epoch);
      loss_sum += fwd.loss;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.step = (epoch + 1) * batches;
    rec.lr = apply_schedule(res.optimizer.config(), epoch);
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.val_error = val.size() ? evaluate(res.net, val, opt.augment, opt.eval_batch) : 0.0;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(rec);
    if (log.is_open()) {
      log << format_record(rec) << "\n";
      log.flush();
      if (opt.epoch_checkpoints)
        save_checkpoint(epoch_checkpoint_path(opt.out_dir, rec.epoch), res.net, res.optimizer,
                        static_cast<std::uint32_t>(rec.epoch));
    }
    if (opt.on_epoch) opt.on_epoch(rec);
    done = rec.epoch;
    if (opt.stop && opt.stop(rec)) break;
  }
  if (!opt.out_dir.empty())
    save_checkpoint((std::filesystem::path(opt.out_dir) / "final.ckpt").string(), res.net, res.optimizer,
                    static_cast<std::uint32_t>(done));
  return res;
}

}  // namespace epinet
