#include "clusterformer/app.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "clusterformer/checkpoint.hpp"
#include "clusterformer/errors.hpp"
#include "clusterformer/grad_suite.hpp"

namespace clusterformer {

namespace fs = std::filesystem;

namespace {

const std::set<std::string>& model_key_names() {
  static const std::set<std::string> names = [] {
    std::set<std::string> s;
    for (const auto& [key, value] : parse_key_values(ModelConfig{}.to_text())) s.insert(key);
    s.erase("seed");
    return s;
  }();
  return names;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v.front() == '-') throw std::invalid_argument(v);
    const auto x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("run config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("run config: '" + key + "' expects a number, got '" + v + "'");
  }
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(v)) out.push_back(parse_u64(key, item));
  return out;
}

Precision parse_precision(const std::string& v) {
  if (v == "single") return Precision::kSingle;
  if (v == "double") return Precision::kDouble;
  throw ConfigError("run config: precision must be 'single' or 'double', got '" + v + "'");
}

std::string precision_name(Precision p) { return p == Precision::kSingle ? "single" : "double"; }

void check_data(const ModelConfig& config, const Dataset& data, const std::string& what) {
  if (data.size() == 0) throw ConfigError(what + " data is empty");
  const Shape expected{config.image_size, config.image_size, config.in_channels};
  if (data.images.front().shape() != expected) {
    throw ConfigError(what + " images have shape " + shape_to_string(data.images.front().shape()) +
                      " but the model expects " + shape_to_string(expected));
  }
  if (data.num_classes() > config.num_classes) {
    throw ConfigError(what + " data has " + std::to_string(data.num_classes()) + " classes but the model has " +
                      std::to_string(config.num_classes));
  }
}

std::string out_file(const RunConfig& run, const std::string& name) { return (fs::path(run.out_dir) / name).string(); }

void make_out_dir(const RunConfig& run) {
  std::error_code ec;
  fs::create_directories(run.out_dir, ec);
  if (ec || !fs::is_directory(run.out_dir)) {
    throw FormatError("cannot create output directory '" + run.out_dir + "'");
  }
}

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::trunc) {
  std::ofstream f(path, std::ios::out | mode);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  return f;
}

std::string fixed6(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

std::string csv_field(const std::string& v) {
  if (v.find_first_of(",\"\n") == std::string::npos) return v;
  std::string q = "\"";
  for (char c : v) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + '"';
}

struct FaultGuard {
  explicit FaultGuard(const std::string& op) : active(!op.empty()) {
    if (active) inject_backward_fault(op);
  }
  ~FaultGuard() {
    if (active) inject_backward_fault("");
  }
  bool active;
};

}  // namespace

RunConfig RunConfig::from_key_values(const KeyValues& kv) {
  RunConfig r;
  for (const auto& [key, v] : kv) {
    if (model_key_names().count(key)) r.model_keys[key] = v;
    else if (key == "command") r.command = v;
    else if (key == "config") r.config_path = v;
    else if (key == "model") r.model = v;
    else if (key == "data") r.data = v;
    else if (key == "val_data") r.val_data = v;
    else if (key == "split") r.split = v;
    else if (key == "epochs") r.epochs = parse_u64(key, v);
    else if (key == "batch_size") r.batch_size = parse_u64(key, v);
    else if (key == "lr") r.lr = parse_double(key, v);
    else if (key == "seed") r.seed = parse_u64(key, v);
    else if (key == "out") r.out_dir = v;
    else if (key == "precision") r.precision = parse_precision(v);
    else if (key == "checkpoint") r.checkpoint = v;
    else if (key == "image") r.image = v;
    else if (key == "threads") r.threads = parse_u64(key, v);
    else if (key == "scope") r.scope = v;
    else if (key == "inject_fault") r.inject_fault = v;
    else if (key == "bench_mechanisms") {
      r.bench_mechanisms.clear();
      for (const auto& m : split_list(v)) {
        try {
          r.bench_mechanisms.push_back(parse_mechanism(m));
        } catch (const std::exception&) {
          throw ConfigError("run config: unknown mechanism '" + m + "'");
        }
      }
    } else if (key == "bench_HW") r.bench_HW = parse_sizes(key, v);
    else if (key == "bench_K") r.bench_K = parse_sizes(key, v);
    else if (key == "bench_D") r.bench_D = parse_sizes(key, v);
    else if (key == "bench_T") r.bench_T = parse_sizes(key, v);
    else if (key == "bench_runs") r.bench_runs = parse_u64(key, v);
    else if (key == "bench_min_run_ms") r.bench_min_run_ms = parse_double(key, v);
    else throw ConfigError("run config: unknown key '" + key + "'");
  }
  return r;
}

RunConfig RunConfig::load(const std::string& path, const KeyValues& overrides) {
  KeyValues kv;
  if (!path.empty()) kv = read_key_value_file(path);
  for (const auto& [key, v] : overrides) kv[key] = v;
  RunConfig r = from_key_values(kv);
  r.config_path = path;
  return r;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig base;
  if (model == "tiny") base = ModelConfig::tiny();
  else if (model == "swin_tiny") base = ModelConfig::swin_tiny();
  else throw ConfigError("run config: model must be 'tiny' or 'swin_tiny', got '" + model + "'");
  ModelConfig c = ModelConfig::from_key_values(model_keys, base);
  c.seed = seed;
  return c;
}

void RunConfig::validate() const {
  static const std::set<std::string> commands{"train", "eval", "bench", "visualize", "gradcheck"};
  if (!commands.count(command)) throw ConfigError("run config: unknown command '" + command + "'");
  model_config().validate();
  if (batch_size == 0) throw ConfigError("run config: batch_size must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("run config: lr must be a positive number");
  if (threads == 0) throw ConfigError("run config: threads must be positive");
  if (out_dir.empty()) throw ConfigError("run config: out must not be empty");
  if (split != "train" && split != "val") throw ConfigError("run config: split must be 'train' or 'val'");
  if (scope != "ops" && scope != "model" && scope != "all") {
    throw ConfigError("run config: scope must be 'ops', 'model' or 'all'");
  }
  if (is_synthetic_source(data)) SyntheticSpec::parse(data);
  if (is_synthetic_source(val_data)) SyntheticSpec::parse(val_data);
  if (command == "eval" && checkpoint.empty()) throw ConfigError("eval: a checkpoint is required");
  if (command == "eval" && split == "val" && val_data == "none") throw ConfigError("eval: split=val needs val_data");
  if (command == "visualize" && image.empty()) throw ConfigError("visualize: an image is required");
  if (command == "bench") {
    if (bench_mechanisms.empty()) throw ConfigError("bench: no mechanisms");
    for (const auto* list : {&bench_HW, &bench_K, &bench_D, &bench_T}) {
      if (list->empty() || std::count(list->begin(), list->end(), std::size_t{0}) > 0) {
        throw ConfigError("bench: every sweep list needs at least one positive value");
      }
    }
    if (bench_runs < 5) throw ConfigError("bench: bench_runs must be at least 5");
    if (!(bench_min_run_ms >= 0.0)) throw ConfigError("bench: bench_min_run_ms must be >= 0");
  }
}

std::uint64_t train_data_seed(std::uint64_t seed) { return seed + 1; }
std::uint64_t val_data_seed(std::uint64_t seed) { return seed + 2; }

std::optional<Dataset> load_val_dataset(const RunConfig& run) {
  if (run.val_data == "none") return std::nullopt;
  if (run.val_data != "auto") return load_dataset(run.val_data, val_data_seed(run.seed));
  if (!is_synthetic_source(run.data)) return std::nullopt;
  SyntheticSpec spec = SyntheticSpec::parse(run.data);
  spec.per_class = std::max<std::size_t>(1, spec.per_class / 2);
  return make_synthetic(spec, val_data_seed(run.seed));
}

TrainOutcome cmd_train(const RunConfig& run, std::ostream& log) {
  run.validate();
  const ModelConfig config = run.model_config();
  PrecisionScope precision(run.precision);
  const Dataset train = load_dataset(run.data, train_data_seed(run.seed));
  const auto val = load_val_dataset(run);
  check_data(config, train, "training");
  if (val) check_data(config, *val, "held-out");
  const Model init = init_params(config, run.seed);

  make_out_dir(run);
  TrainOutcome out;
  out.metrics_path = out_file(run, "metrics.csv");
  out.best_path = out_file(run, "best.ckpt");
  out.final_path = out_file(run, "final.ckpt");
  auto metrics = open_out(out.metrics_path);
  metrics << metrics_csv_header() << '\n' << std::flush;

  log << "train: " << train.size() << " samples" << (val ? ", " + std::to_string(val->size()) + " held out" : "")
      << ", " << param_count(init) << " parameters, " << run.epochs << " epochs, " << precision_name(run.precision)
      << " precision\n";
  TrainOptions options;
  options.epochs = run.epochs;
  options.batch_size = run.batch_size;
  options.adam.lr = run.lr;
  options.seed = run.seed;
  options.eval_threads = run.threads;
  out.result = train_model(init, train, val ? &*val : nullptr, options, [&](const EpochMetrics& m) {
    metrics << metrics_csv_row(m) << '\n' << std::flush;
    log << "epoch " << m.epoch << ' ' << m.split << " loss=" << fixed6(m.result.loss)
        << " top1=" << fixed6(m.result.top1) << '\n';
  });
  save_checkpoint(out.result.best_model, out.best_path);
  save_checkpoint(out.result.final_model, out.final_path);
  log << "best epoch " << out.result.best_epoch << "; wrote " << out.metrics_path << ", " << out.best_path << ", "
      << out.final_path << '\n';
  return out;
}

EvalResult cmd_eval(const RunConfig& run, std::ostream& log) {
  run.validate();
  PrecisionScope precision(run.precision);
  const Model model = load_checkpoint(run.checkpoint);
  if (!run.config_path.empty() || !run.model_keys.empty()) {
    ModelConfig expected = run.model_config();
    expected.seed = model.config.seed;
    if (!(expected == model.config)) {
      throw ConfigError("eval: checkpoint '" + run.checkpoint + "' does not match the given model config");
    }
  }
  Dataset data;
  if (run.split == "train") {
    data = load_dataset(run.data, train_data_seed(run.seed));
  } else {
    auto val = load_val_dataset(run);
    if (!val) throw ConfigError("eval: no held-out data for split=val");
    data = std::move(*val);
  }
  check_data(model.config, data, "evaluation");
  const EvalResult r = evaluate(model, data, run.threads);

  make_out_dir(run);
  const std::string path = out_file(run, "eval.csv");
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  auto csv = open_out(path, std::ios::app);
  if (fresh) csv << "checkpoint,data,split,count,loss,top1,top5\n";
  csv << csv_field(run.checkpoint) << ',' << csv_field(run.data) << ',' << run.split << ',' << r.count << ',' << fixed6(r.loss) << ','
      << fixed6(r.top1) << ',' << (r.top5 ? fixed6(*r.top5) : "") << '\n';
  log << "eval " << run.split << ": " << r.count << " samples, loss=" << fixed6(r.loss) << " top1=" << fixed6(r.top1);
  if (r.top5) log << " top5=" << fixed6(*r.top5);
  log << '\n';
  return r;
}

AssignmentMap assignment_map(const Model& model, const Tensor& image) {
  NoGradScope no_grad;
  const ForwardResult f = model_forward(image, model);
  const Tensor& A = f.states.back().assignment;
  AssignmentMap map;
  map.rows = f.grids.back().first;
  map.cols = f.grids.back().second;
  map.K = A.dim(0);
  const std::size_t n = A.dim(1);
  const auto a = A.data();
  map.labels.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < map.K; ++k) {
      if (a[k * n + j] > a[best * n + j]) best = k;
    }
    map.labels[j] = best;
  }
  return map;
}

std::array<std::uint8_t, 3> palette_color(std::size_t id) {
  // Sixteen base colors with distinct high nibbles; the low nibble of red
  // carries id / 16 so the first 256 ids never collide.
  static const std::uint8_t base[16][3] = {
      {0x1f, 0x77, 0xb4}, {0xff, 0x7f, 0x0e}, {0x2c, 0xa0, 0x2c}, {0xd6, 0x27, 0x28}, {0x94, 0x67, 0xbd},
      {0x8c, 0x56, 0x4b}, {0xe3, 0x77, 0xc2}, {0x7f, 0x7f, 0x7f}, {0xbc, 0xbd, 0x22}, {0x17, 0xbe, 0xcf},
      {0xae, 0xc7, 0xe8}, {0xff, 0xbb, 0x78}, {0x98, 0xdf, 0x8a}, {0xff, 0x98, 0x96}, {0xc5, 0xb0, 0xd5},
      {0x00, 0x00, 0x00}};
  const auto* b = base[id % 16];
  const auto low = static_cast<std::uint8_t>((id / 16) & 0x0f);
  return {static_cast<std::uint8_t>((b[0] & 0xf0) | low), b[1], b[2]};
}

RgbImage render_assignment(const AssignmentMap& map, std::size_t cell_px) {
  if (cell_px == 0) throw ConfigError("render_assignment: cell size must be positive");
  RgbImage img;
  img.width = map.cols * cell_px;
  img.height = map.rows * cell_px;
  img.pixels.resize(img.width * img.height * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto c = palette_color(map.labels[(y / cell_px) * map.cols + x / cell_px]);
      std::copy(c.begin(), c.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>((y * img.width + x) * 3));
    }
  }
  return img;
}

VisualizeOutcome cmd_visualize(const RunConfig& run, std::ostream& log) {
  run.validate();
  PrecisionScope precision(run.precision);
  const Model model = run.checkpoint.empty() ? init_params(run.model_config(), run.seed) : load_checkpoint(run.checkpoint);
  const Tensor image = read_pnm(run.image);
  const Shape expected{model.config.image_size, model.config.image_size, model.config.in_channels};
  if (image.shape() != expected) {
    throw ConfigError("visualize: image '" + run.image + "' has shape " + shape_to_string(image.shape()) +
                      " but the model expects " + shape_to_string(expected));
  }
  VisualizeOutcome out;
  out.map = assignment_map(model, image);
  const std::size_t cell = std::max<std::size_t>(1, model.config.image_size / std::max(out.map.rows, out.map.cols));

  make_out_dir(run);
  out.image_path = out_file(run, "assignment.ppm");
  write_ppm(out.image_path, render_assignment(out.map, cell));
  log << "assignment map " << out.map.rows << "x" << out.map.cols << ", K=" << out.map.K << '\n';
  for (std::size_t r = 0; r < out.map.rows; ++r) {
    for (std::size_t c = 0; c < out.map.cols; ++c) log << (c ? " " : "") << std::setw(3) << out.map.labels[r * out.map.cols + c];
    log << '\n';
  }
  log << "wrote " << out.image_path << '\n';
  return out;
}

std::string fit_summary(const ScalingFit& fit) {
  std::ostringstream os;
  os << "fit mechanism=" << mechanism_name(fit.mechanism) << " axis=" << axis_name(fit.axis) << " points=" << fit.points
     << std::fixed << std::setprecision(4) << " time_slope=" << fit.time_slope << " flop_slope=" << fit.flop_slope
     << " core_slope=" << fit.core_slope << " core_exponent=";
  if (fit.exact_core_exponent) os << *fit.exact_core_exponent;
  else os << "none";
  return os.str();
}

BenchOutcome cmd_bench(const RunConfig& run, std::ostream& log) {
  run.validate();
  make_out_dir(run);
  PrecisionScope precision(run.precision);
  BenchOptions options;
  options.runs = run.bench_runs;
  options.min_run_ns = run.bench_min_run_ms * 1e6;
  options.seed = run.seed;

  BenchOutcome out;
  out.csv_path = out_file(run, "bench.csv");
  for (Mechanism m : run.bench_mechanisms)
    for (std::size_t HW : run.bench_HW)
      for (std::size_t K : run.bench_K)
        for (std::size_t D : run.bench_D)
          for (std::size_t T : run.bench_T) {
            out.samples.push_back(measure_cost(m, HW, K, D, T, options));
            const auto& s = out.samples.back();
            log << mechanism_name(m) << " HW=" << HW << " K=" << K << " D=" << D << " T=" << T << " flops=" << s.flops
                << " median_ns=" << std::llround(s.time_ns_median) << (s.unstable ? " (unstable)" : "") << '\n';
          }
  {
    auto csv = open_out(out.csv_path);
    write_bench_csv(csv, out.samples);
  }

  std::ifstream in(out.csv_path);
  const auto rows = read_bench_csv(in);
  std::vector<Axis> varying;
  if (run.bench_D.size() == 1) {
    if (run.bench_HW.size() > 1) varying.push_back(Axis::kHW);
    if (run.bench_K.size() > 1) varying.push_back(Axis::kK);
    if (run.bench_T.size() > 1) varying.push_back(Axis::kT);
  }
  if (varying.size() == 1) {
    for (Mechanism m : run.bench_mechanisms) {
      std::vector<CostSample> group;
      std::copy_if(rows.begin(), rows.end(), std::back_inserter(group),
                   [&](const CostSample& s) { return s.mechanism == m; });
      try {
        out.fits.push_back(fit_scaling(group, varying.front()));
        log << fit_summary(out.fits.back()) << '\n';
      } catch (const ConfigError& e) {
        log << "fit skipped for " << mechanism_name(m) << ": " << e.what() << '\n';
      }
    }
  } else {
    log << "fit skipped: sweep must vary exactly one of HW, K, T\n";
  }
  log << "wrote " << out.csv_path << '\n';
  return out;
}

bool cmd_gradcheck(const RunConfig& run, std::ostream& log) {
  run.validate();
  const ModelConfig config = run.model_config();
  std::vector<GradReport> reports;
  {
    FaultGuard fault(run.inject_fault);
    PrecisionScope precision(Precision::kDouble);
    if (run.scope != "model") reports = op_grad_suite();
    if (run.scope != "ops") reports.push_back(model_grad_check(config));
  }
  make_out_dir(run);
  auto csv = open_out(out_file(run, "gradcheck.csv"));
  csv << GradReport::csv_header() << '\n';
  std::size_t failed = 0;
  for (const auto& r : reports) {
    csv << r.to_csv_row() << '\n';
    log << r.to_text();
    failed += r.pass() ? 0 : 1;
  }
  log << "gradcheck: " << reports.size() << " checks, " << failed << " failed\n";
  return failed == 0;
}

int run_command(const RunConfig& run, std::ostream& log, std::ostream& err) {
  try {
    if (run.command == "train") cmd_train(run, log);
    else if (run.command == "eval") cmd_eval(run, log);
    else if (run.command == "visualize") cmd_visualize(run, log);
    else if (run.command == "bench") cmd_bench(run, log);
    else if (run.command == "gradcheck") return cmd_gradcheck(run, log) ? 0 : 1;
    else run.validate();
    return 0;
  } catch (const NonFiniteLoss& e) {
    err << "error: " << e.what() << '\n';
    return 4;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace clusterformer
