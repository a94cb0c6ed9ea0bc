// Runs the ten acceptance criteria and prints one PASS/FAIL line for each.
// Exit status is 0 only when every selected criterion passes.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>

#include <epinet/epinet.hpp>

#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace epinet;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  std::string data;  // MNIST directory, empty when unavailable
  std::string out;
  std::uint64_t seed = 1;
  std::size_t epochs = 20;
  std::size_t norm_epochs = 20;
  std::vector<EpochRecord> plain_log;  // filled by criterion 5
};

std::string config(const std::string& name) { return std::string(EPINET_CONFIG_DIR) + "/" + name; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[2048];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

bool have_mnist(const Context& ctx) {
  return !ctx.data.empty() && fs::exists(fs::path(ctx.data) / "train-images-idx3-ubyte");
}

struct Mnist {
  Dataset train, test;
};

// Full MNIST with the training mean subtracted from both splits.
const Mnist& mnist(const Context& ctx) {
  static std::optional<Mnist> cached;
  if (!cached) {
    Mnist m{load_split(ctx.data, DatasetKind::mnist, "train"), load_split(ctx.data, DatasetKind::mnist, "test")};
    const auto mean = preprocess(m.train);
    subtract_mean(m.test, mean);
    cached = std::move(m);
  }
  return *cached;
}

std::string fresh_dir(const Context& ctx, const std::string& name) {
  const auto dir = fs::path(ctx.out) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

// 1 ----------------------------------------------------------------------

Outcome gradient_suite(Context& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto tiny = load_config(config("gradcheck-tiny.net"));
  std::size_t epitomic = 0;
  for (const auto& l : tiny.layers) epitomic += l.type == LayerType::epitomic;
  const auto suite = run_gradcheck_suite(ctx.seed, 20, &tiny);
  const double secs = seconds_since(t0);
  bool ok = epitomic == 2 && secs < 300.0;
  std::ostringstream os;
  double worst = 0;
  for (const auto& e : suite) {
    ok = ok && e.pass() && e.instances >= 20;
    worst = std::max(worst, e.max_rel_error);
    if (!e.pass()) {
      os << e.name << " " << e.passed << "/" << e.instances << " ";
      for (const auto& r : e.reports)
        if (!r.pass) std::fputs(r.text().c_str(), stderr);
    }
  }
  os << fmt("%zu checks x 20 instances, worst rel err %.2e < 1e-4, %.1f s (limit 300 s)", suite.size(), worst, secs);
  return {ok, os.str()};
}

// 2 ----------------------------------------------------------------------

Outcome maxout_oracle(Context& ctx) {
  Rng rng = Rng::stream(ctx.seed, 2);
  double worst = 0;
  std::size_t exact_mismatch = 0, outputs = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng.below(4), w = 1 + rng.below(5), c = 1 + rng.below(3);
    const std::size_t v = w + rng.below(9 - w), es = 1 + rng.below(2), stride = 1 + rng.below(2);
    const bool norm = rng.bernoulli(0.5);
    EpitomeBank<double> bank(k, v, w, c, es, norm, 0.01);
    oracle::fill_normal(bank.weights, rng);
    const std::size_t side = w + rng.below(5);
    const auto x = oracle::random_tensor<double>(Shape{2, c, side, side}, rng);
    const auto res = epitomic_forward(x, bank, stride);
    const std::size_t nc = bank.candidates();
    // shared path: every extracted filter as a one-filter convolution
    Tensor<double> shared(res.output.shape(), -std::numeric_limits<double>::infinity());
    for (std::size_t kk = 0; kk < k; ++kk)
      for (std::size_t cy = 0; cy < nc; ++cy)
        for (std::size_t cx = 0; cx < nc; ++cx) {
          const Displacement p{static_cast<std::uint8_t>(cy * es), static_cast<std::uint8_t>(cx * es)};
          auto flat = extract_filter(bank, kk, p).flatten();
          if (norm) {
            const auto cf = center_filter<double>(flat, bank.lambda);
            for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = cf.centered[i] / cf.contrast;
          }
          ConvBank<double> one(1, w, c, stride);
          std::copy(flat.begin(), flat.end(), one.weights.data());
          const auto s = conv_forward(x, one);
          for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t oy = 0; oy < s.shape().h; ++oy)
              for (std::size_t ox = 0; ox < s.shape().w; ++ox) {
                double& best = shared(n, kk, oy, ox);
                best = std::max(best, s(n, 0, oy, ox));
              }
        }
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t kk = 0; kk < k; ++kk)
        for (std::size_t oy = 0; oy < res.output.shape().h; ++oy)
          for (std::size_t ox = 0; ox < res.output.shape().w; ++ox) {
            ++outputs;
            exact_mismatch += res.output(n, kk, oy, ox) != shared(n, kk, oy, ox);
            const auto ref = oracle::best(x, n, oy * stride, ox * stride, bank, kk, 0, nc, 0, nc);
            worst = std::max(worst, std::abs(res.output(n, kk, oy, ox) - static_cast<double>(ref.value)));
          }
  }
  return {exact_mismatch == 0 && worst <= 1e-12,
          fmt("200 instances, %zu outputs: %zu differ from the shared-path max, independent oracle max |diff| %.2e "
              "(limit 1e-12)",
              outputs, exact_mismatch, worst)};
}

// 3 ----------------------------------------------------------------------

Outcome degenerate_equivalences(Context& ctx) {
  Rng rng = Rng::stream(ctx.seed, 3);
  std::size_t conv_bad = 0, topo_bad = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 1 + rng.below(5), w = 1 + rng.below(5), c = 1 + rng.below(3), stride = 1 + rng.below(3);
    EpitomeBank<float> bank(k, w, w, c);
    oracle::fill_normal(bank.weights, rng);
    ConvBank<float> conv(k, w, c, stride);
    conv.weights = bank.weights;
    const auto x = oracle::random_tensor<float>(Shape{2, c, w + rng.below(6), w + rng.below(6)}, rng);
    conv_bad += !(epitomic_forward(x, bank, stride).output == conv_forward(x, conv));
  }
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 1 + rng.below(4), w = 1 + rng.below(4), c = 1 + rng.below(3), stride = 1 + rng.below(2);
    EpitomeBank<double> mini(1 + rng.below(3), w + d - 1, w, c, 1, rng.bernoulli(0.5), 0.01);
    oracle::fill_normal(mini.weights, rng);
    TopographicBank<double> topo(mini, d);
    const auto x = oracle::random_tensor<double>(Shape{2, c, w + 4, w + 3}, rng);
    const auto a = epitomic_forward(x, mini, stride);
    const auto b = topographic_forward(x, topo, stride);
    const auto up = oracle::random_tensor<double>(a.output.shape(), rng);
    const auto ga = epitomic_backward(up, x, mini, a.argmax, stride);
    const auto gb = topographic_backward(up, x, topo, b.argmax, stride);
    topo_bad += !(topo.outputs_per_epitome() == 1 && a.output == b.output && a.argmax == b.argmax &&
                  ga.input == gb.input && ga.weights == gb.weights);
  }
  return {conv_bad == 0 && topo_bad == 0,
          fmt("V==W vs conv: %zu/50 differ; topographic n_o=1 vs epitomic (fwd+bwd): %zu/50 differ", conv_bad,
              topo_bad)};
}

// 4 ----------------------------------------------------------------------

Outcome topographic_shapes(Context&) {
  const auto cfg = load_config(config("imagenet-topographic.net"));
  const std::map<std::string, std::size_t> want = {{"t1", 25}, {"t2", 49}, {"t6", 64}};
  Network<float> net(cfg, 1);
  Rng rng(1);
  Tensor<float> x(cfg.input.batch(1));
  for (auto& v : x.values()) v = static_cast<float>(rng.normal(0.0, 1.0));
  net.predict(x);
  const auto& shapes = net.runtime_shapes();
  bool ok = shapes.size() == cfg.layers.size();
  std::ostringstream os;
  std::size_t found = 0;
  for (std::size_t i = 0; ok && i < cfg.layers.size(); ++i) {
    const auto& l = cfg.layers[i];
    ok = ok && shapes[i] == l.out.batch(1);
    const auto it = want.find(l.name);
    if (it == want.end()) continue;
    ++found;
    const std::size_t inferred = l.out.c / l.epitomes, runtime = shapes[i].c / l.epitomes;
    ok = ok && l.type == LayerType::topographic && inferred == it->second && runtime == it->second &&
         l.out.c % l.epitomes == 0;
    os << l.name << ": " << l.epitomes << "x" << inferred << " (runtime " << l.epitomes << "x" << runtime << ")  ";
  }
  ok = ok && found == 3;
  os << "expected 4x25, 4x49, 8x64";
  return {ok, os.str()};
}

// 5 ----------------------------------------------------------------------

Outcome mnist_experiment(Context& ctx) {
  if (!have_mnist(ctx)) return {false, "MNIST not found (set EPINET_DATA or pass --data)"};
  const auto& d = mnist(ctx);
  TrainOptions opt;
  opt.epochs = ctx.epochs;
  opt.seed = ctx.seed;
  opt.out_dir = fresh_dir(ctx, "mnist-epitomic");
  opt.on_epoch = [](const EpochRecord& r) {
    std::fprintf(stderr, "  mnist-epitomic %s  %.1fs\n", format_record(r).c_str(), r.seconds);
  };
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = run_training(load_config(config("mnist-epitomic.net")), d.train, d.test, opt);
  const double secs = seconds_since(t0);
  ctx.plain_log = res.log;
  const double final_err = res.log.back().val_error;
  double best = 1.0;
  std::size_t best_epoch = 0;
  for (const auto& r : res.log)
    if (r.val_error < best) best = r.val_error, best_epoch = r.epoch;
  return {final_err <= 0.015 && res.log.size() == ctx.epochs && ctx.epochs <= 20 && secs <= 7200.0,
          fmt("test error after %zu epochs %.2f%% (limit 1.50%%; best %.2f%% at epoch %zu), %.0f s (limit 7200 s)",
              res.log.size(), 100 * final_err, 100 * best, best_epoch, secs)};
}

// 6 ----------------------------------------------------------------------

Outcome overfit(Context& ctx) {
  if (!have_mnist(ctx)) return {false, "MNIST not found (set EPINET_DATA or pass --data)"};
  auto subset = load_split(ctx.data, DatasetKind::mnist, "train").head(256);
  preprocess(subset);
  TrainOptions opt;
  opt.epochs = 200;
  opt.seed = ctx.seed;
  opt.stop = [](const EpochRecord& r) { return r.val_error == 0.0; };
  const auto t0 = std::chrono::steady_clock::now();
  auto res = run_training(load_config(config("mnist-epitomic.net")), subset, subset, opt);
  const double secs = seconds_since(t0);
  const double err = evaluate(res.net, subset);
  return {err == 0.0 && secs < 300.0,
          fmt("train accuracy %.2f%% on 256 images after %zu epochs (limit 200), %.1f s (limit 300 s)",
              100 * (1 - err), res.log.size(), secs)};
}

// 7 ----------------------------------------------------------------------

Outcome normalization_properties(Context& ctx) {
  Rng rng = Rng::stream(ctx.seed, 7);
  std::size_t shift_bad = 0, scale_bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng.below(3), w = 1 + rng.below(4), c = 1 + rng.below(3);
    EpitomeBank<double> bank(k, w + rng.below(4), w, c, 1, true, 0.01);
    oracle::fill_dyadic(bank.weights, rng);
    Tensor<double> x(Shape{2, c, w + 3, w + 3});
    oracle::fill_dyadic(x, rng);
    const auto before = epitomic_forward(x, bank, 1);
    auto shifted = bank;
    const double shift = static_cast<double>(static_cast<int>(rng.below(33)) - 16) / 4.0;
    for (auto& v : shifted.weights.values()) v += shift;
    const auto after = epitomic_forward(x, shifted, 1);
    shift_bad += !(before.output == after.output && before.argmax == after.argmax);
  }
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t w = 1 + rng.below(4), c = 1 + rng.below(3);
    EpitomeBank<double> bank(1 + rng.below(3), w + rng.below(4), w, c, 1, true, 0.0);
    oracle::fill_normal(bank.weights, rng);
    const auto x = oracle::random_tensor<double>(Shape{1, c, w + 3, w + 3}, rng);
    const auto before = epitomic_forward(x, bank, 1);
    for (double scale : {0.125, 0.5, 2.0, 16.0}) {
      auto scaled = bank;
      for (auto& v : scaled.weights.values()) v *= scale;
      const auto after = epitomic_forward(x, scaled, 1);
      scale_bad += !(before.output == after.output && before.argmax == after.argmax);
    }
  }
  // Decay exclusion: with zero gradients and zero velocity only weight decay
  // can move a parameter.
  const auto cfg = load_config(config("mnist-epitomic-norm.net"));
  Network<float> net(cfg, ctx.seed);
  SgdOptimizer<float> sgd(net, SgdConfig{});
  std::vector<Tensor<float>> initial;
  for (auto* p : net.params()) {
    initial.push_back(p->value);
    p->grad = Tensor<float>(p->value.shape());
  }
  for (int s = 0; s < 10; ++s) sgd.step(net, 0);
  std::size_t normalized = 0, normalized_moved = 0, decayed_moved = 0, decayed = 0;
  auto ps = net.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto* spec = cfg.find(ps[i]->name.substr(0, ps[i]->name.find('.')));
    const bool is_norm = spec && spec->normalize && ps[i]->rank == 4;
    const bool moved = !(ps[i]->value == initial[i]);
    if (is_norm) {
      ++normalized;
      normalized_moved += moved;
    } else if (ps[i]->decay) {
      ++decayed;
      decayed_moved += moved;
    }
  }
  const bool decay_ok = normalized == 3 && normalized_moved == 0 && decayed > 0 && decayed_moved == decayed;
  return {shift_bad == 0 && scale_bad == 0 && decay_ok,
          fmt("mean shift: %zu/100 instances differ; lambda=0 scaling: %zu/400 differ; %zu normalized layers, "
              "%zu moved under 10 decay-only steps (wd=5e-4), %zu/%zu decayed tensors moved",
              shift_bad, scale_bad, normalized, normalized_moved, decayed_moved, decayed)};
}

// 8 ----------------------------------------------------------------------

Outcome cost_parity(Context& ctx) {
  struct Case { std::size_t c, h, w, d, k; };
  Rng rng = Rng::stream(ctx.seed, 8);
  std::ostringstream os;
  bool ok = true;
  for (const Case cs : {Case{1, 28, 7, 2, 32}, Case{3, 32, 5, 4, 16}, Case{3, 20, 3, 3, 8}, Case{2, 17, 4, 2, 5},
                        Case{3, 227, 11, 7, 4}}) {
    if ((cs.h - cs.w + 1) % cs.d != 0) throw Error("cost-parity case needs (H - W + 1) divisible by D");
    const auto x = oracle::random_tensor<float>(Shape{2, cs.c, cs.h, cs.h}, rng);
    OpCounter conv_count, epi_count;
    ConvBank<float> conv(cs.k, cs.w, cs.c, 1);
    const auto pooled = maxpool_forward(conv_forward(x, conv, &conv_count), cs.d, cs.d).output;
    EpitomeBank<float> bank(cs.k, cs.w + cs.d - 1, cs.w, cs.c);
    const auto epi = epitomic_forward(x, bank, cs.d, &epi_count).output;
    const bool same = conv_count.inner_products == epi_count.inner_products && pooled.shape() == epi.shape() &&
                      conv_count.multiply_adds == epi_count.multiply_adds;
    ok = ok && same;
    os << fmt("[%zux%zu W=%zu D=%zu: %llu vs %llu] ", cs.h, cs.h, cs.w, cs.d,
              static_cast<unsigned long long>(conv_count.inner_products),
              static_cast<unsigned long long>(epi_count.inner_products));
  }
  // the same through whole networks built from configs
  const char* pool_net = "[net]\ninput = 1x28x28\nclasses = 10\n[layer c]\ntype = conv\nchannels = 32\nfilter = 7\n"
                         "[layer p]\ntype = maxpool\npool = 2\n[layer fc]\ntype = fc\nchannels = 10\n"
                         "[layer out]\ntype = softmax\n";
  const char* epi_net = "[net]\ninput = 1x28x28\nclasses = 10\n[layer e]\ntype = epitomic\nepitomes = 32\n"
                        "epitome = 8\nfilter = 7\nstride = 2\n[layer fc]\ntype = fc\nchannels = 10\n"
                        "[layer out]\ntype = softmax\n";
  Network<float> a(parse_config(pool_net), 1), b(parse_config(epi_net), 1);
  Tensor<float> x(Shape{3, 1, 28, 28}, 0.5f);
  a.predict(x);
  b.predict(x);
  ok = ok && a.counter().inner_products == b.counter().inner_products;
  os << fmt("networks: %llu vs %llu",
            static_cast<unsigned long long>(a.counter().inner_products),
            static_cast<unsigned long long>(b.counter().inner_products));
  return {ok, os.str()};
}

// 9 ----------------------------------------------------------------------

Outcome determinism(Context& ctx) {
  if (!have_mnist(ctx)) return {false, "MNIST not found (set EPINET_DATA or pass --data)"};
  auto train = load_split(ctx.data, DatasetKind::mnist, "train").head(2048);
  auto val = load_split(ctx.data, DatasetKind::mnist, "test").head(1000);
  subtract_mean(val, preprocess(train));
  const auto cfg = load_config(config("mnist-epitomic.net"));
  auto run = [&](const std::string& name, std::size_t epochs, const std::string& resume) {
    TrainOptions opt;
    opt.epochs = epochs;
    opt.seed = ctx.seed + 100;
    opt.out_dir = fs::path(ctx.out) / name;
    if (resume.empty()) fresh_dir(ctx, name);
    opt.resume = resume;
    run_training(cfg, train, val, opt);
    return read_file((fs::path(opt.out_dir) / "final.ckpt").string());
  };
  const auto a = run("determinism-a", 3, "");
  const auto b = run("determinism-b", 3, "");
  run("determinism-resume", 1, "");
  const auto resumed = run("determinism-resume", 3, epoch_checkpoint_path((fs::path(ctx.out) / "determinism-resume").string(), 1));
  const auto path = (fs::path(ctx.out) / "determinism-a" / "final.ckpt").string();
  auto loaded = load_checkpoint(path, cfg);
  const auto again = (fs::path(ctx.out) / "determinism-a" / "resaved.ckpt").string();
  save_checkpoint(again, loaded.net, loaded.optimizer, loaded.epoch);
  const bool same_seed = a == b, resume_ok = a == resumed, roundtrip = read_file(again) == a;
  return {same_seed && resume_ok && roundtrip,
          fmt("identical seeds -> identical final.ckpt: %s; resume from epoch 1 -> identical: %s; save/load/save "
              "byte-identical: %s (%zu bytes)",
              same_seed ? "yes" : "no", resume_ok ? "yes" : "no", roundtrip ? "yes" : "no", a.size())};
}

// 10 ---------------------------------------------------------------------

Outcome convergence_curves(Context& ctx) {
  if (!have_mnist(ctx)) return {false, "MNIST not found (set EPINET_DATA or pass --data)"};
  const auto plain_path = fs::path(ctx.out) / "mnist-epitomic" / "train_log.csv";
  if (!fs::exists(plain_path)) return {false, "unnormalized log missing: criterion 5 must run first"};
  const auto& d = mnist(ctx);
  TrainOptions opt;
  opt.epochs = ctx.norm_epochs;
  opt.seed = ctx.seed;
  opt.out_dir = fresh_dir(ctx, "mnist-epitomic-norm");
  opt.on_epoch = [](const EpochRecord& r) {
    std::fprintf(stderr, "  mnist-epitomic-norm %s  %.1fs\n", format_record(r).c_str(), r.seconds);
  };
  run_training(load_config(config("mnist-epitomic-norm.net")), d.train, d.test, opt);
  const auto plain = read_train_log(plain_path.string());
  const auto norm = read_train_log((fs::path(opt.out_dir) / "train_log.csv").string());
  if (plain.size() < 5 || norm.size() < 5) return {false, "logs have fewer than 5 epochs"};
  std::fprintf(stderr, "  epoch  unnormalized  normalized\n");
  for (std::size_t i = 0; i < std::min(plain.size(), norm.size()); ++i)
    std::fprintf(stderr, "  %5zu  %11.2f%%  %9.2f%%\n", plain[i].epoch, 100 * plain[i].val_error,
                 100 * norm[i].val_error);
  const double p5 = plain[4].val_error, n5 = norm[4].val_error;
  return {true, fmt("epoch-5 test error: normalized %.2f%% vs unnormalized %.2f%% (%s); logs: %s, %s", 100 * n5,
                    100 * p5, n5 < p5 ? "normalized ahead" : "normalized not ahead", plain_path.c_str(),
                    (fs::path(opt.out_dir) / "train_log.csv").c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  Context ctx;
  std::vector<int> only;
  int threads = 1;
  app.add_option("--data", ctx.data, "MNIST directory (default: $EPINET_DATA)");
  app.add_option("--out", ctx.out, "Directory for training artifacts")->required();
  app.add_option("--seed", ctx.seed, "Seed")->capture_default_str();
  app.add_option("--epochs", ctx.epochs, "Epochs for the MNIST experiment")->capture_default_str();
  app.add_option("--norm-epochs", ctx.norm_epochs, "Epochs for the normalized MNIST run")->capture_default_str();
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--threads", threads, "Worker threads")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  if (ctx.data.empty())
    if (const char* env = std::getenv("EPINET_DATA")) ctx.data = env;
  kernel_threads() = threads;
  fs::create_directories(ctx.out);

  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria = {
      {"gradient suite", gradient_suite},
      {"maxout-oracle equivalence", maxout_oracle},
      {"degenerate equivalences", degenerate_equivalences},
      {"topographic output counts", topographic_shapes},
      {"MNIST experiment", mnist_experiment},
      {"overfit sanity", overfit},
      {"normalization properties", normalization_properties},
      {"cost parity", cost_parity},
      {"determinism and persistence", determinism},
      {"convergence curves", convergence_curves},
  };
  const std::set<int> selected(only.begin(), only.end());
  // the same lines also go to <out>/acceptance.txt
  std::FILE* summary = std::fopen((fs::path(ctx.out) / "acceptance.txt").string().c_str(), "w");
  auto emit = [&](const std::string& line) {
    std::fputs(line.c_str(), stdout);
    std::fflush(stdout);
    if (summary) std::fputs(line.c_str(), summary);
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    emit(fmt("%s  criterion %2d  %-28s %s  [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
             o.detail.c_str(), seconds_since(t0)));
  }
  emit(fmt("%s: %d criteria failed\n", failed ? "FAILED" : "ALL PASSED", failed));
  if (summary) std::fclose(summary);
  return failed ? 1 : 0;
}
