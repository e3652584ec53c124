#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <random>
#include <regex>
#include <sstream>

#include <CLI11.hpp>

#include "kvq/error.hpp"
#include "kvq/kvcache.hpp"
#include "kvq/planner.hpp"
#include "kvq/serialize.hpp"
#include "kvq/simulator.hpp"

namespace kvq::cli {

namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------- calibrate

struct CalibrateArgs {
  std::string keys_dir;
  std::string values_dir;
  std::string grads_dir;
  int bits = 4;
  double outlier_frac = 0.01;
  bool qnorm = false;
  std::size_t head_dim = 0;  // 0: the whole vector is one head
  double theta_base = 10000.0;
  std::string out;
};

// layer -> sample -> path, for files named <prefix>layer<L>_sample<S>.kvqt.
using FileIndex = std::map<std::int64_t, std::map<std::int64_t, fs::path>>;

FileIndex index_dir(const fs::path& dir, const std::string& prefix) {
  if (!fs::is_directory(dir)) fail(ErrorKind::kIo, "not a directory: " + dir.string());
  const std::regex re(prefix + R"(layer(\d+)_sample(\d+)\.kvqt)");
  FileIndex idx;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (!e.is_regular_file() || !std::regex_match(name, m, re)) continue;
    idx[std::stoll(m[1])][std::stoll(m[2])] = e.path();
  }
  return idx;
}

std::vector<Tensor> load_samples(const std::map<std::int64_t, fs::path>& files, std::int64_t layer) {
  std::vector<Tensor> out;
  std::int64_t expect = 0;
  for (const auto& [s, path] : files) {
    if (s != expect) fail(ErrorKind::kMalformed, "layer " + std::to_string(layer) + ": sample ids must be 0..N-1");
    ++expect;
    out.push_back(read_tensor(path));
  }
  return out;
}

QuantizerBundle calibrate_bundle(const CalibrateArgs& a) {
  QuantConfig cfg;
  cfg.bits = a.bits;
  cfg.outlier_fraction = a.outlier_frac;
  cfg.qnorm = a.qnorm;
  cfg.validate();

  const FileIndex keys = index_dir(a.keys_dir, "");
  const FileIndex values = index_dir(a.values_dir, "");
  if (keys.empty()) fail(ErrorKind::kIo, "no layer<L>_sample<S>.kvqt files in " + a.keys_dir);
  FileIndex gk, gv;
  if (!a.grads_dir.empty()) {
    gk = index_dir(a.grads_dir, "keys_");
    gv = index_dir(a.grads_dir, "values_");
  }

  QuantizerBundle b;
  b.bits = a.bits;
  b.outlier_fraction = a.outlier_frac;
  b.qnorm = a.qnorm;
  for (const auto& [layer, files] : keys) {
    const auto vit = values.find(layer);
    if (vit == values.end() || vit->second.size() != files.size())
      fail(ErrorKind::kMalformed, "layer " + std::to_string(layer) + ": key and value sample sets differ");
    CalibrationSet calib;
    calib.keys = load_samples(files, layer);
    calib.values = load_samples(vit->second, layer);
    if (!a.grads_dir.empty()) {
      const auto kit = gk.find(layer);
      const auto git = gv.find(layer);
      if (kit == gk.end() || git == gv.end() || kit->second.size() != files.size() ||
          git->second.size() != files.size())
        fail(ErrorKind::kMalformed, "layer " + std::to_string(layer) + ": gradient files missing");
      calib.grads_keys = load_samples(kit->second, layer);
      calib.grads_values = load_samples(git->second, layer);
    }
    calib.validate();
    RopeParams rope;
    rope.head_dim = a.head_dim == 0 ? calib.channels() : a.head_dim;
    rope.theta_base = a.theta_base;
    LayerQuantizers lq;
    lq.layer_id = layer;
    lq.key = calibrate_key_quantizer(calib, cfg, rope);
    lq.value = calibrate_value_quantizer(calib, cfg);
    b.layers.push_back(std::move(lq));
  }
  return b;
}

// --------------------------------------------------------------------- plan

struct PlanRow {
  std::string scheme;
  std::uint64_t seq_len = 0;
  PlanReport report;
};

std::vector<PlanRow> plan_rows(const Json& j) {
  PlanConfig base;
  std::vector<std::uint64_t> seq_lens;
  std::vector<std::string> schemes;
  try {
    base.n_layers = j.at("n_layers").get<std::uint64_t>();
    base.n_heads = j.at("n_heads").get<std::uint64_t>();
    base.head_dim = j.at("head_dim").get<std::uint64_t>();
    base.batch = j.value("batch", std::uint64_t{1});
    const Json& sl = j.at("seq_len");
    seq_lens = sl.is_array() ? sl.get<std::vector<std::uint64_t>>() : std::vector<std::uint64_t>{sl.get<std::uint64_t>()};
    schemes = j.value("schemes", std::vector<std::string>{"fp16", "nuq4-1%", "nuq3-1%", "nuq2-1%"});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kMalformed, std::string("plan config: ") + e.what());
  }
  if (seq_lens.empty() || schemes.empty()) fail(ErrorKind::kInvalidArgument, "plan config: empty seq_len or schemes");
  std::vector<PlanRow> rows;
  for (const auto& s : schemes) {
    for (auto l : seq_lens) {
      PlanConfig c = base;
      c.seq_len = l;
      apply_scheme_name(s, c);
      rows.push_back({s, l, plan(c)});
    }
  }
  return rows;
}

Json plan_json(const std::vector<PlanRow>& rows) {
  Json arr = Json::array();
  for (const auto& r : rows)
    arr.push_back({{"scheme", r.scheme},
                   {"seq_len", r.seq_len},
                   {"fp16_bytes", r.report.fp16_bytes},
                   {"quant_bytes", r.report.quant_bytes},
                   {"avg_bits", r.report.avg_bits_per_element},
                   {"compression_ratio", r.report.compression_ratio}});
  return {{"rows", arr}};
}

void plan_table(const std::vector<PlanRow>& rows, std::ostream& out) {
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %10s %12s %12s %9s %7s\n", "scheme", "seq_len", "fp16_GB", "quant_GB",
                "avg_bits", "ratio");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-12s %10llu %12.2f %12.2f %9.3f %7.2f\n", r.scheme.c_str(),
                  static_cast<unsigned long long>(r.seq_len), static_cast<double>(r.report.fp16_bytes) / 1e9,
                  r.report.quant_bytes / 1e9, r.report.avg_bits_per_element, r.report.compression_ratio);
    out << line;
  }
}

// ----------------------------------------------------------------- simulate

struct SimulateArgs {
  std::uint64_t seed = 0;
  int bits = 4;
  double outlier_frac = 0.01;
  bool qnorm = false;
  std::size_t steps = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t head_dim = 8;
  std::size_t tokens = 64;
  std::size_t calib_samples = 16;
  std::string report;
  std::string dump_calib;
};

Json report_json(const SimulateArgs& a, const FidelityReport& r) {
  return {{"seed", a.seed},
          {"bits", a.bits},
          {"outlier_fraction", a.outlier_frac},
          {"qnorm", a.qnorm},
          {"steps", a.steps},
          {"n_layers", a.layers},
          {"n_heads", a.heads},
          {"head_dim", a.head_dim},
          {"tokens", a.tokens},
          {"step_errors", r.step_errors},
          {"mean_step_error", r.mean_step_error},
          {"max_abs_error", r.max_abs_error},
          {"layer_score_errors", r.layer_score_errors}};
}

void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + p.string());
}

void dump_calibration(const ToyData& data, const fs::path& dir) {
  for (const char* sub : {"keys", "values", "grads"}) make_dir(dir / sub);
  for (std::size_t l = 0; l < data.layers.size(); ++l) {
    const CalibrationSet& c = data.layers[l].calib;
    for (std::size_t s = 0; s < c.keys.size(); ++s) {
      const std::string name = "layer" + std::to_string(l) + "_sample" + std::to_string(s) + ".kvqt";
      write_tensor(c.keys[s], dir / "keys" / name);
      write_tensor(c.values[s], dir / "values" / name);
      write_tensor(c.grads_keys[s], dir / "grads" / ("keys_" + name));
      write_tensor(c.grads_values[s], dir / "grads" / ("values_" + name));
    }
  }
}

// -------------------------------------------------------------------- bench

struct BenchArgs {
  std::vector<std::uint64_t> seq_lens{2048, 4096, 16384};
  int bits = 4;
  double outlier_frac = 0.01;
  std::size_t repeats = 5;
  std::size_t head_dim = 128;
  std::uint64_t seed = 0;
  std::string format = "table";
};

struct BenchRow {
  std::uint64_t seq_len;
  std::string kernel;
  double mean_ns;
  double median_ns;
};

template <class F>
std::pair<double, double> time_ns(std::size_t repeats, F&& f) {
  std::vector<double> ns;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const auto t1 = std::chrono::steady_clock::now();
    ns.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
  }
  double mean = 0.0;
  for (double x : ns) mean += x;
  mean /= static_cast<double>(ns.size());
  std::sort(ns.begin(), ns.end());
  const std::size_t n = ns.size();
  const double median = n % 2 ? ns[n / 2] : 0.5 * (ns[n / 2 - 1] + ns[n / 2]);
  return {mean, median};
}

Tensor random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double heavy) {
  std::normal_distribution<double> normal;
  Tensor t = Tensor::zeros({rows, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t.at(r, c) = static_cast<float>(normal(rng) * (c == 0 ? heavy : 1.0));
  return t;
}

std::vector<BenchRow> run_bench(const BenchArgs& a) {
  QuantConfig cfg;
  cfg.bits = a.bits;
  cfg.outlier_fraction = a.outlier_frac;
  cfg.validate();
  std::mt19937_64 rng(a.seed);
  const std::size_t d = a.head_dim;
  RopeParams rope;
  rope.head_dim = d;
  CalibrationSet calib;
  calib.keys.push_back(random_matrix(512, d, rng, 10.0));
  calib.values.push_back(random_matrix(512, d, rng, 1.0));
  auto kq = std::make_shared<const KeyQuantizer>(calibrate_key_quantizer(calib, cfg, rope));
  auto vq = std::make_shared<const ValueQuantizer>(calibrate_value_quantizer(calib, cfg));

  std::vector<BenchRow> rows;
  for (auto l : a.seq_lens) {
    QuantizedKVCache cache(kq, vq);
    const Tensor k = random_matrix(l, d, rng, 10.0);
    const Tensor v = random_matrix(l, d, rng, 1.0);
    for (std::size_t t = 0; t < l; ++t) {
      cache.append_key(k.row(t));
      cache.append_value(v.row(t));
    }
    std::vector<float> q(d), w(l, 1.0f / static_cast<float>(l));
    std::normal_distribution<double> normal;
    for (auto& x : q) x = static_cast<float>(normal(rng));

    const auto kvec = k.row(l - 1);
    const auto vvec = v.row(l - 1);
    auto [pm, pmed] = time_ns(a.repeats, [&] {
      PackedCodes kp(a.bits), vp(a.bits);
      for (auto c : kq->quantize(kvec).codes) kp.push_back(c);
      for (auto c : vq->quantize(vvec).codes) vp.push_back(c);
    });
    const auto ko = kq->quantize(kvec).outliers;
    const auto vo = vq->quantize(vvec).outliers;
    auto [sm, smed] = time_ns(a.repeats, [&] {
      SparseCSC ks(d);
      SparseCSR vs(d);
      ks.append_token(ko);
      vs.append_token(vo);
    });
    std::vector<float> scores;
    auto [qm, qmed] = time_ns(a.repeats, [&] { scores = cache.qk_scores(q); });
    std::vector<float> outv;
    auto [am, amed] = time_ns(a.repeats, [&] { outv = cache.av_matvec(w); });
    rows.push_back({l, "pack", pm, pmed});
    rows.push_back({l, "sparse_append", sm, smed});
    rows.push_back({l, "qk_scores", qm, qmed});
    rows.push_back({l, "av_matvec", am, amed});
    rows.push_back({l, "Total", qm + am, qmed + amed});
  }
  return rows;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::kIo, "cannot open " + p.string() + " for writing");
  f << s;
  if (!f) fail(ErrorKind::kIo, "write failed: " + p.string());
}

Json read_json(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) fail(ErrorKind::kIo, "cannot open " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return Json::parse(ss.str());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kMalformed, p.string() + ": " + e.what());
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"KV cache quantization toolkit"};
  app.name("kvq");
  app.require_subcommand(1);

  CalibrateArgs ca;
  auto* cal = app.add_subcommand("calibrate", "derive per-layer Key/Value quantizers from KVQT activations");
  cal->add_option("--keys", ca.keys_dir, "directory of layer<L>_sample<S>.kvqt pre-RoPE keys")->required();
  cal->add_option("--values", ca.values_dir, "directory of layer<L>_sample<S>.kvqt values")->required();
  cal->add_option("--grads", ca.grads_dir, "directory of keys_/values_layer<L>_sample<S>.kvqt gradients");
  cal->add_option("--bits", ca.bits)->check(CLI::IsMember({2, 3, 4}));
  cal->add_option("--outlier-frac", ca.outlier_frac)->check(CLI::Range(0.0, 0.4999));
  cal->add_flag("--qnorm", ca.qnorm);
  cal->add_option("--head-dim", ca.head_dim, "RoPE head size (default: whole vector)");
  cal->add_option("--theta", ca.theta_base)->check(CLI::PositiveNumber);
  cal->add_option("--out", ca.out, "output JSON bundle")->required();

  std::string plan_config, plan_format = "table";
  auto* pl = app.add_subcommand("plan", "KV cache memory accounting");
  pl->add_option("--config", plan_config, "model shape JSON")->required()->check(CLI::ExistingFile);
  pl->add_option("--format", plan_format)->check(CLI::IsMember({"table", "json"}));

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "toy decode: quantized vs full-precision cache");
  sim->add_option("--seed", sa.seed);
  sim->add_option("--bits", sa.bits, "2, 3, 4, or 16 for no quantization")->check(CLI::IsMember({2, 3, 4, 16}));
  sim->add_option("--outlier-frac", sa.outlier_frac)->check(CLI::Range(0.0, 0.4999));
  sim->add_flag("--qnorm", sa.qnorm);
  sim->add_option("--steps", sa.steps)->check(CLI::PositiveNumber);
  sim->add_option("--layers", sa.layers)->check(CLI::Range(1, 4));
  sim->add_option("--heads", sa.heads)->check(CLI::Range(1, 4));
  sim->add_option("--head-dim", sa.head_dim)->check(CLI::IsMember({2, 4, 6, 8, 10, 12, 14, 16}));
  sim->add_option("--tokens", sa.tokens)->check(CLI::Range(2, 4096));
  sim->add_option("--calib-samples", sa.calib_samples)->check(CLI::Range(1, 256));
  sim->add_option("--report", sa.report, "write the report JSON here (default: stdout)");
  sim->add_option("--dump-calib", sa.dump_calib, "write calibration activations and gradients as KVQT");

  BenchArgs ba;
  auto* be = app.add_subcommand("bench", "CPU kernel latency");
  be->add_option("--seq-lens", ba.seq_lens)->delimiter(',');
  be->add_option("--bits", ba.bits)->check(CLI::IsMember({2, 3, 4}));
  be->add_option("--outlier-frac", ba.outlier_frac)->check(CLI::Range(0.0, 0.4999));
  be->add_option("--repeats", ba.repeats)->check(CLI::PositiveNumber);
  be->add_option("--head-dim", ba.head_dim)->check(CLI::IsMember({2, 4, 8, 16, 32, 64, 128, 256}));
  be->add_option("--seed", ba.seed);
  be->add_option("--format", ba.format)->check(CLI::IsMember({"table", "json"}));

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: invalid_argument: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*cal) {
      save_bundle(calibrate_bundle(ca), ca.out);
      out << "wrote " << ca.out << '\n';
    } else if (*pl) {
      const auto rows = plan_rows(read_json(plan_config));
      if (plan_format == "json")
        out << plan_json(rows).dump(2) << '\n';
      else
        plan_table(rows, out);
    } else if (*sim) {
      ToyDims dims;
      dims.n_layers = sa.layers;
      dims.n_heads = sa.heads;
      dims.head_dim = sa.head_dim;
      dims.tokens = sa.tokens;
      dims.calib_samples = sa.calib_samples;
      SimConfig cfg;
      cfg.quant.bits = sa.bits;
      cfg.quant.outlier_fraction = sa.outlier_frac;
      cfg.quant.qnorm = sa.qnorm;
      cfg.validate(dims.n_layers);
      if (sa.steps > sa.tokens) fail(ErrorKind::kInvalidArgument, "--steps must not exceed --tokens");
      const ToyModel model = make_toy_model(dims, sa.seed);
      const ToyData data = make_toy_data(model, true);
      if (!sa.dump_calib.empty()) dump_calibration(data, sa.dump_calib);
      const std::string rep = report_json(sa, decode_compare(model, data, cfg, sa.steps)).dump(2) + "\n";
      if (sa.report.empty())
        out << rep;
      else
        write_text(sa.report, rep);
    } else if (*be) {
      if (ba.seq_lens.empty()) fail(ErrorKind::kInvalidArgument, "--seq-lens is empty");
      for (auto l : ba.seq_lens)
        if (l == 0) fail(ErrorKind::kInvalidArgument, "--seq-lens entries must be positive");
      const auto rows = run_bench(ba);
      if (ba.format == "json") {
        Json arr = Json::array();
        for (const auto& r : rows)
          arr.push_back({{"seq_len", r.seq_len}, {"kernel", r.kernel}, {"mean_ns", r.mean_ns}, {"median_ns", r.median_ns}});
        out << Json{{"rows", arr}}.dump(2) << '\n';
      } else {
        char line[128];
        std::snprintf(line, sizeof line, "%8s %-14s %14s %14s\n", "seq_len", "kernel", "mean_ns", "median_ns");
        out << line;
        for (const auto& r : rows) {
          std::snprintf(line, sizeof line, "%8llu %-14s %14.0f %14.0f\n", static_cast<unsigned long long>(r.seq_len),
                        r.kernel.c_str(), r.mean_ns, r.median_ns);
          out << line;
        }
      }
    }
  } catch (const Error& e) {
    err << "error: " << to_string(e.kind()) << ": " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace kvq::cli
