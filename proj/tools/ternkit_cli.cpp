// ternkit command-line front end.
//
// Subcommands:
//   verify       self-contained kernel/quantizer verification suites
//   bench        layer-wise conv benchmark (six standard cases)
//   bench-net    whole-network benchmark over a packed model file
//   train        float pretrain + quantization-aware training
//   eval         simulated vs packed accuracy of a checkpoint
//   pack         checkpoint -> packed model file
//   dump-alphas  quantizer step sizes as CSV
//
// Exit codes: 0 success, 1 verification failure, 2 usage error, 3 IO error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ternkit/bench.hpp"
#include "ternkit/bitkernels.hpp"
#include "ternkit/codec.hpp"
#include "ternkit/linalg.hpp"
#include "ternkit/model_io.hpp"
#include "ternkit/quantizer.hpp"
#include "ternkit/tinynet.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFail = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

// ---------------------------------------------------------------------------
// verify

struct Suite {
  std::string name;
  bool passed = true;
  std::string detail;
};

bool suite_codec_identity(Suite& s) {
  for (unsigned code = 0; code < 4; ++code) {
    if (std::popcount(code) != ternkit::decode_lane(code) + 1) {
      s.detail = "code " + std::to_string(code);
      return false;
    }
  }
  s.detail = "4/4 codes";
  return true;
}

bool suite_truth_table(Suite& s, bool sabotage) {
  int ok = 0;
  for (unsigned xc = 0; xc < 4; ++xc) {
    for (unsigned yc = 0; yc < 4; ++yc) {
      // lane 0 under test, remaining lanes canonical zero
      const std::uint64_t xw = (ternkit::kAuxi & ~3ull) | xc;
      const std::uint64_t yw = (ternkit::kAuxi & ~3ull) | yc;
      std::uint64_t tm = ternkit::ternary_multiply_word(xw, yw);
      if (sabotage) tm ^= 2;  // corrupt lane 0 (negative-control mode)
      const int got = ternkit::decode_lane(static_cast<unsigned>(tm & 3));
      const int want = ternkit::decode_lane(xc) * ternkit::decode_lane(yc);
      if (got == want) ++ok;
    }
  }
  s.detail = std::to_string(ok) + "/16 lane pairs";
  return ok == 16;
}

bool suite_pack_roundtrip(Suite& s) {
  std::mt19937 rng(11);
  std::uniform_int_distribution<int> val(-1, 1), len(0, 200);
  for (int it = 0; it < 10000; ++it) {
    std::vector<std::int8_t> v(len(rng));
    for (auto& e : v) e = static_cast<std::int8_t>(val(rng));
    if (ternkit::unpack(ternkit::pack(v)) != v) {
      s.detail = "iteration " + std::to_string(it);
      return false;
    }
  }
  s.detail = "10000 random vectors";
  return true;
}

bool suite_dot_oracles(Suite& s) {
  std::mt19937 rng(12);
  std::uniform_int_distribution<int> tern(-1, 1), act(0, 2), len(1, 512);
  for (int it = 0; it < 2000; ++it) {
    const int n = len(rng);
    std::vector<std::int8_t> x(n), y(n), a(n);
    std::int64_t ref = 0, ref_nn = 0, wsum = 0;
    for (int i = 0; i < n; ++i) {
      x[i] = static_cast<std::int8_t>(tern(rng));
      y[i] = static_cast<std::int8_t>(tern(rng));
      a[i] = static_cast<std::int8_t>(act(rng));
      ref += x[i] * y[i];
      ref_nn += a[i] * y[i];
      wsum += y[i];
    }
    if (ternkit::ternary_dot(ternkit::pack(x), ternkit::pack(y)) != ref) {
      s.detail = "ternary_dot, iteration " + std::to_string(it);
      return false;
    }
    std::vector<std::int8_t> stored(a);
    for (auto& e : stored) e = static_cast<std::int8_t>(e - 1);
    ternkit::PackedTernaryVector ap = ternkit::pack(stored);
    ap.nonneg_offset = true;
    if (ternkit::ternary_dot_nonneg(ap, ternkit::pack(y), wsum) != ref_nn) {
      s.detail = "ternary_dot_nonneg, iteration " + std::to_string(it);
      return false;
    }
    std::vector<std::int8_t> bx(n), by(n);
    std::int64_t bref = 0;
    for (int i = 0; i < n; ++i) {
      bx[i] = tern(rng) >= 0 ? 1 : -1;
      by[i] = tern(rng) >= 0 ? 1 : -1;
      bref += bx[i] * by[i];
    }
    if (ternkit::binary_dot(ternkit::pack_binary(bx), ternkit::pack_binary(by)) !=
        bref) {
      s.detail = "binary_dot, iteration " + std::to_string(it);
      return false;
    }
  }
  s.detail = "2000 random instances per kernel";
  return true;
}

bool suite_quantizer(Suite& s) {
  std::mt19937 rng(13);
  std::uniform_real_distribution<float> au(0.2f, 2.0f), pu(-3.0f, 3.0f);
  for (int it = 0; it < 20000; ++it) {
    const ternkit::QuantThresholds t{au(rng), au(rng)};
    const float p = pu(rng);
    // threshold-comparison reference: level change at -a1/2 and a2/2
    int want = 0;
    if (p > t.alpha2 / 2) want = 1;
    if (p < -t.alpha1 / 2) want = -1;
    const int got = ternkit::quantize_weight_value(p, t);
    const float d1 = std::abs(p + t.alpha1 / 2), d2 = std::abs(p - t.alpha2 / 2);
    if (got != want && d1 > 1e-6f && d2 > 1e-6f) {
      s.detail = "weight mode, p=" + std::to_string(p);
      return false;
    }
  }
  s.detail = "20000 grid points";
  return true;
}

bool suite_gradients(Suite& s) {
  std::mt19937 rng(14);
  std::uniform_real_distribution<float> au(0.4f, 1.6f), pu(-2.0f, 2.0f);
  const float h = 1e-3f;
  int checked = 0;
  for (int it = 0; it < 4000 && checked < 1000; ++it) {
    const ternkit::QuantThresholds t{au(rng), au(rng)};
    float p = pu(rng);
    const float knees[] = {-t.alpha1, 0.0f, t.alpha2};
    bool near = false;
    for (float k : knees) {
      if (std::abs(p - k) < 0.05f * std::min(t.alpha1, t.alpha2)) near = true;
    }
    if (near) continue;
    const float up = 1.0f;
    std::vector<float> pv{p}, uv{up};
    ternkit::QuantGrad g = ternkit::quantize_backward(pv, t, uv,
                                                      ternkit::QuantMode::kWeight);
    auto surro = [&](float x) {
      return ternkit::detail::surrogate_weight(x, t);
    };
    const float fd = (surro(p + h) - surro(p - h)) / (2 * h);
    const float scale = std::max({std::abs(fd), std::abs(g.d_input[0]), 1.0f});
    if (std::abs(g.d_input[0] - fd) / scale > 1e-3f) {
      s.detail = "d_input at p=" + std::to_string(p);
      return false;
    }
    ++checked;
  }
  s.detail = std::to_string(checked) + " finite-difference points";
  return checked >= 1000;
}

bool suite_model_io(Suite& s) {
  ternkit::TinyNet net =
      ternkit::make_tiny_net(2, 32, 1, 4, /*quantized=*/true, false, 5);
  ternkit::PackedModel m = ternkit::lower_to_packed(net);
  const auto b1 = ternkit::serialize_model(m);
  ternkit::PackedModel m2 = ternkit::deserialize_model(b1);
  const auto b2 = ternkit::serialize_model(m2);
  if (b1 != b2) {
    s.detail = "serialize/deserialize/serialize not byte-identical";
    return false;
  }
  s.detail = "byte-identical round trip";
  return true;
}

int cmd_verify(bool negative_control) {
  std::vector<Suite> suites;
  auto run = [&](const std::string& name, auto fn) {
    Suite s;
    s.name = name;
    s.passed = fn(s);
    std::printf("%-24s %s  (%s)\n", name.c_str(), s.passed ? "PASS" : "FAIL",
                s.detail.c_str());
    suites.push_back(s);
  };
  run("codec-identity", [](Suite& s) { return suite_codec_identity(s); });
  run("truth-table", [&](Suite& s) { return suite_truth_table(s, negative_control); });
  run("pack-roundtrip", [](Suite& s) { return suite_pack_roundtrip(s); });
  run("dot-oracles", [](Suite& s) { return suite_dot_oracles(s); });
  run("quantizer-grid", [](Suite& s) { return suite_quantizer(s); });
  run("gradient-fd", [](Suite& s) { return suite_gradients(s); });
  run("model-roundtrip", [](Suite& s) { return suite_model_io(s); });

  if (ternkit::kOpCountersEnabled) {
    ternkit::reset_op_counters();
    std::vector<std::int8_t> v(4096, 1);
    (void)ternkit::ternary_dot(ternkit::pack(v), ternkit::pack(v));
    const ternkit::OpCounters c = ternkit::op_counters();
    std::printf("op counters: %llu TM + %llu popcount words for N=4096\n",
                static_cast<unsigned long long>(c.tm_words),
                static_cast<unsigned long long>(c.popcount_words));
  }

  for (const auto& s : suites) {
    if (!s.passed) return kExitVerifyFail;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench / bench-net

int cmd_bench(int case_id, const std::string& precision, int repeats,
              const std::string& csv_path, unsigned seed) {
  const auto cases = ternkit::standard_bench_cases();
  std::vector<ternkit::Precision> precs;
  if (precision == "all") {
    precs = {ternkit::Precision::kBinary, ternkit::Precision::kTernary,
             ternkit::Precision::kTwoBit};
  } else if (precision == "bin") {
    precs = {ternkit::Precision::kBinary};
  } else if (precision == "ter") {
    precs = {ternkit::Precision::kTernary};
  } else if (precision == "2bit") {
    precs = {ternkit::Precision::kTwoBit};
  } else {
    std::cerr << "unknown precision: " << precision << "\n";
    return kExitUsage;
  }

  std::vector<std::string> rows;
  std::cout << ternkit::bench_csv_header() << "\n";
  for (const auto& bc : cases) {
    if (case_id != 0 && bc.id != case_id) continue;
    for (ternkit::Precision p : precs) {
      ternkit::BenchResult r = ternkit::bench_conv_case(bc, p, repeats, seed);
      const std::string row = ternkit::bench_csv_row(r);
      std::cout << row << (r.stats.stable ? "" : "  # unstable") << "\n";
      rows.push_back(row);
    }
  }
  if (!csv_path.empty()) {
    std::ofstream f(csv_path, std::ios::trunc);
    if (!f) {
      std::cerr << "cannot write " << csv_path << "\n";
      return kExitIo;
    }
    f << ternkit::bench_csv_header() << "\n";
    for (const auto& row : rows) f << row << "\n";
  }
  return kExitOk;
}

int cmd_bench_net(const std::string& model_path, int repeats, unsigned seed) {
  ternkit::PackedModel m = ternkit::load_model(model_path);
  ternkit::NetBenchResult r = ternkit::bench_network(m, repeats, seed);
  std::printf("quantized layers, batch 1, %d runs\n", repeats);
  std::printf("  ternary  mean %.3f us  stddev %.3f us\n", r.ternary_us,
              r.ternary_stddev_us);
  std::printf("  2bit     mean %.3f us  stddev %.3f us\n", r.two_bit_us,
              r.two_bit_stddev_us);
  std::printf("  speedup ternary vs 2bit: %.2fx%s\n", r.ratio_ter_vs_2bit,
              r.stable ? "" : "  (unstable)");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train / eval / pack / dump-alphas

struct TrainConfig {
  int hidden = 256;
  int blocks = 2;
  int per_class = 256;
  int float_epochs = 60;
  int qat_epochs = 80;
  unsigned seed = 1;
  bool calibration = true;
  std::string out = "tinynet.fatc";
  std::string csv;
};

void append_metrics(std::vector<std::string>& rows, const std::string& phase,
                    const std::vector<ternkit::EpochMetrics>& log) {
  char buf[128];
  for (const auto& m : log) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%.4f,%.2f,%.2f,%.5f", phase.c_str(),
                  m.epoch, m.loss, m.train_acc, m.test_acc, m.lr);
    rows.emplace_back(buf);
  }
}

int cmd_train(const TrainConfig& cfg) {
  const ternkit::Dataset train_set =
      ternkit::make_cluster_dataset(cfg.per_class, cfg.seed);
  const ternkit::Dataset test_set =
      ternkit::make_cluster_dataset(cfg.per_class / 4, cfg.seed + 1000);

  ternkit::TinyNet fnet = ternkit::make_tiny_net(2, cfg.hidden, cfg.blocks, 4,
                                                 false, false, cfg.seed);
  ternkit::Hyperparams hp;
  hp.seed = cfg.seed;
  hp.epochs = cfg.float_epochs;
  std::vector<std::string> rows;
  auto flog = ternkit::train(fnet, train_set, test_set, hp);
  append_metrics(rows, "float", flog);
  const float float_acc = ternkit::evaluate(fnet, test_set);
  std::printf("float baseline: %.2f%% test accuracy\n", float_acc);

  ternkit::TinyNet qnet = ternkit::to_quantized(fnet, cfg.calibration);
  hp.epochs = cfg.qat_epochs;
  hp.seed = cfg.seed + 1;
  auto qlog = ternkit::train(qnet, train_set, test_set, hp);
  append_metrics(rows, "qat", qlog);
  const float q_acc = ternkit::evaluate(qnet, test_set);
  std::printf("ternary (calibration %s): %.2f%% test accuracy\n",
              cfg.calibration ? "on" : "off", q_acc);

  ternkit::save_checkpoint(qnet, cfg.out);
  std::printf("checkpoint written to %s\n", cfg.out.c_str());
  if (!cfg.csv.empty()) {
    std::ofstream f(cfg.csv, std::ios::trunc);
    if (!f) {
      std::cerr << "cannot write " << cfg.csv << "\n";
      return kExitIo;
    }
    f << "phase,epoch,loss,train_acc,test_acc,lr\n";
    for (const auto& row : rows) f << row << "\n";
  }
  return kExitOk;
}

int cmd_eval(const std::string& ckpt, int per_class, unsigned seed) {
  ternkit::TinyNet net = ternkit::load_checkpoint(ckpt);
  ternkit::Dataset held = ternkit::make_cluster_dataset(per_class, seed + 2000);
  const float sim_acc = ternkit::evaluate(net, held);
  std::printf("simulated accuracy: %.2f%%\n", sim_acc);
  if (!net.quantized) return kExitOk;

  ternkit::PackedModel m = ternkit::lower_to_packed(net);
  std::vector<float> logits = ternkit::packed_forward(m, held.x, held.n);
  std::vector<int> pred = ternkit::argmax_rows(logits, held.n, net.n_classes);
  ternkit::ForwardCache c =
      ternkit::forward_qat(net, held.x, held.n, {.training = false});
  std::vector<int> sim_pred =
      ternkit::argmax_rows(c.logits, held.n, net.n_classes);
  int correct = 0, agree = 0;
  for (int i = 0; i < held.n; ++i) {
    if (pred[i] == held.y[i]) ++correct;
    if (pred[i] == sim_pred[i]) ++agree;
  }
  std::printf("packed accuracy:    %.2f%%\n", 100.0f * correct / held.n);
  std::printf("argmax agreement:   %.2f%%\n", 100.0f * agree / held.n);
  return kExitOk;
}

int cmd_pack(const std::string& ckpt, const std::string& out) {
  ternkit::TinyNet net = ternkit::load_checkpoint(ckpt);
  if (!net.quantized) {
    std::cerr << "checkpoint is not quantized; train with QAT first\n";
    return kExitUsage;
  }
  ternkit::save_model(ternkit::lower_to_packed(net), out);
  std::printf("packed model written to %s\n", out.c_str());
  return kExitOk;
}

int cmd_dump_alphas(const std::string& ckpt, const std::string& csv_path) {
  ternkit::TinyNet net = ternkit::load_checkpoint(ckpt);
  std::vector<std::string> rows;
  char buf[96];
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    const auto& b = net.blocks[i];
    std::snprintf(buf, sizeof(buf), "%zu,weight,%.6f,%.6f", i,
                  b.thr_w.alpha1, b.thr_w.alpha2);
    rows.emplace_back(buf);
    std::snprintf(buf, sizeof(buf), "%zu,activation,%.6f,%.6f", i,
                  b.thr_a.alpha1, b.thr_a.alpha2);
    rows.emplace_back(buf);
  }
  std::ostream* out = &std::cout;
  std::ofstream f;
  if (!csv_path.empty()) {
    f.open(csv_path, std::ios::trunc);
    if (!f) {
      std::cerr << "cannot write " << csv_path << "\n";
      return kExitIo;
    }
    out = &f;
  }
  *out << "layer,tensor,alpha1,alpha2\n";
  for (const auto& row : rows) *out << row << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bit-packed ternary kernel library"};
  app.require_subcommand(1);
  app.set_config("--config");

  bool negative_control = false;
  auto* verify = app.add_subcommand("verify", "run kernel verification suites");
  verify->add_flag("--negative-control", negative_control,
                   "inject a codec mutation; the truth-table suite must fail");

  int case_id = 0, repeats = 5;
  unsigned seed = 7;
  std::string precision = "all", csv_path;
  auto* bench = app.add_subcommand("bench", "layer-wise conv benchmark");
  bench->add_option("--case", case_id, "case id 1..6, 0 = all")
      ->check(CLI::Range(0, 6));
  bench->add_option("--precision", precision, "bin|ter|2bit|all");
  bench->add_option("--repeats", repeats, "measured runs per case");
  bench->add_option("--csv", csv_path, "also write results to this CSV file");
  bench->add_option("--seed", seed, "rng seed for operand data");

  std::string model_path;
  auto* bench_net = app.add_subcommand("bench-net", "whole-network benchmark");
  bench_net->add_option("--model", model_path, "packed model file")->required();
  bench_net->add_option("--repeats", repeats, "measured runs");
  bench_net->add_option("--seed", seed, "rng seed for input data");

  TrainConfig tc;
  std::string calibration = "on";
  auto* train = app.add_subcommand("train", "float pretrain + QAT");
  train->add_option("--hidden", tc.hidden, "hidden width");
  train->add_option("--blocks", tc.blocks, "residual blocks");
  train->add_option("--per-class", tc.per_class, "training samples per class");
  train->add_option("--float-epochs", tc.float_epochs);
  train->add_option("--epochs", tc.qat_epochs, "QAT epochs");
  train->add_option("--seed", tc.seed);
  train->add_option("--calibration", calibration, "on|off");
  train->add_option("--out", tc.out, "checkpoint path");
  train->add_option("--csv", tc.csv, "per-epoch metrics CSV");

  std::string ckpt_path, out_path = "tinynet.fatn";
  int eval_per_class = 250;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  eval->add_option("--per-class", eval_per_class, "held-out samples per class");
  eval->add_option("--seed", seed);

  auto* pack = app.add_subcommand("pack", "lower a checkpoint to a model file");
  pack->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  pack->add_option("--out", out_path, "packed model path");

  auto* dump = app.add_subcommand("dump-alphas", "step sizes as CSV");
  dump->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  dump->add_option("--csv", csv_path, "output CSV (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (verify->parsed()) return cmd_verify(negative_control);
    if (bench->parsed()) return cmd_bench(case_id, precision, repeats, csv_path, seed);
    if (bench_net->parsed()) return cmd_bench_net(model_path, repeats, seed);
    if (train->parsed()) {
      if (calibration != "on" && calibration != "off") {
        std::cerr << "--calibration must be on or off\n";
        return kExitUsage;
      }
      tc.calibration = calibration == "on";
      return cmd_train(tc);
    }
    if (eval->parsed()) return cmd_eval(ckpt_path, eval_per_class, seed);
    if (pack->parsed()) return cmd_pack(ckpt_path, out_path);
    if (dump->parsed()) return cmd_dump_alphas(ckpt_path, csv_path);
  } catch (const ternkit::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::runtime_error& e) {
    const std::string what = e.what();
    std::cerr << "error: " << what << "\n";
    return what.find("open") != std::string::npos ||
                   what.find("read") != std::string::npos ||
                   what.find("write") != std::string::npos
               ? kExitIo
               : kExitVerifyFail;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
