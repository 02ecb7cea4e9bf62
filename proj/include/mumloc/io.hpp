#ifndef MUMLOC_IO_HPP
#define MUMLOC_IO_HPP

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "json.hpp"
#include "mumloc/error.hpp"
#include "mumloc/evaluation.hpp"
#include "mumloc/grid.hpp"
#include "mumloc/psf.hpp"
#include "mumloc/simulator.hpp"
#include "mumloc/solver.hpp"

namespace mumloc {

using Json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kVolumeFormat = "mumloc-volume-1";

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a temporary file and a rename, so readers never see a
/// partially written file.
inline void write_bytes(const fs::path& p, std::span<const char> bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw Error(ErrorKind::IoError, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, p, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot rename " + tmp.string() + ": " + ec.message());
}

inline void write_text(const fs::path& p, const std::string& s) { write_bytes(p, std::span<const char>(s.data(), s.size())); }

inline Json read_json(const fs::path& p) {
  const std::string s = read_text(p);
  try {
    return Json::parse(s);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorKind::ParseError, p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& p, const Json& j) { write_text(p, j.dump(2) + "\n"); }

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(std::span<const char> bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (char c : bytes) {
    h ^= std::uint8_t(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string file_hash(const fs::path& p) {
  const std::string s = read_text(p);
  return hex64(fnv1a(std::span<const char>(s.data(), s.size())));
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// ---------------------------------------------------------------------------
// Strict JSON object reading
// ---------------------------------------------------------------------------

/// Reads named fields of one JSON object; finish() rejects keys that were
/// never asked for. Errors carry the dotted path of the offending key.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error(ErrorKind::ConfigError, where() + ": expected an object");
  }

  template <class T>
  bool get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return false;
    try {
      out = it->template get<T>();
    } catch (const Json::exception&) {
      throw Error(ErrorKind::ConfigError, where(key) + ": wrong type (" + it->dump() + ")");
    }
    return true;
  }

  template <class T>
  void require(const char* key, T& out) {
    if (!get(key, out)) throw Error(ErrorKind::ConfigError, where(key) + ": missing");
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw Error(ErrorKind::ConfigError, where(k) + ": unknown key");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------
// Config types <-> JSON
// ---------------------------------------------------------------------------

inline Json to_json(const GridConfig& g) {
  return {{"low_dims", g.low_dims},     {"high_dims", g.high_dims},       {"low_voxel", g.low_voxel},
          {"high_voxel", g.high_voxel}, {"plane_offsets", g.plane_offsets}, {"max_drift", g.max_drift},
          {"trunc_sigma", g.trunc_sigma}};
}

inline void from_json(const Json& j, GridConfig& g, const std::string& path = "grid") {
  ObjectReader r(j, path);
  r.get("low_dims", g.low_dims);
  r.get("high_dims", g.high_dims);
  r.get("low_voxel", g.low_voxel);
  r.get("high_voxel", g.high_voxel);
  r.get("plane_offsets", g.plane_offsets);
  r.get("max_drift", g.max_drift);
  r.get("trunc_sigma", g.trunc_sigma);
  r.finish();
}

inline Json to_json(const PsfParams& p) {
  return {{"a_prime", p.a_prime}, {"b", p.b}, {"w0", p.w0}, {"d", p.d}, {"A", p.A}, {"B", p.B}};
}

inline void from_json(const Json& j, PsfParams& p, const std::string& path = "psf") {
  ObjectReader r(j, path);
  r.get("a_prime", p.a_prime);
  r.get("b", p.b);
  r.get("w0", p.w0);
  r.get("d", p.d);
  r.get("A", p.A);
  r.get("B", p.B);
  r.finish();
}

inline Json to_json(const NoiseConfig& n) {
  return {{"photon_scale", n.photon_scale},
          {"gaussian_sigma", n.gaussian_sigma},
          {"enable_poisson", n.enable_poisson},
          {"enable_gaussian", n.enable_gaussian}};
}

inline void from_json(const Json& j, NoiseConfig& n, const std::string& path = "noise") {
  ObjectReader r(j, path);
  r.get("photon_scale", n.photon_scale);
  r.get("gaussian_sigma", n.gaussian_sigma);
  r.get("enable_poisson", n.enable_poisson);
  r.get("enable_gaussian", n.enable_gaussian);
  r.finish();
}

inline Json to_json(const Coord3& c) { return Json::array({c.x, c.y, c.z}); }

inline Json to_json(const SceneConfig& s) {
  return {{"molecules", s.molecules},
          {"volume", to_json(s.volume)},
          {"weight_min", s.weight_min},
          {"weight_max", s.weight_max},
          {"lateral_margin", s.lateral_margin}};
}

inline void from_json(const Json& j, SceneConfig& s, const std::string& path = "scene") {
  ObjectReader r(j, path);
  r.get("molecules", s.molecules);
  std::array<double, 3> v{s.volume.x, s.volume.y, s.volume.z};
  if (r.get("volume", v)) s.volume = {v[0], v[1], v[2]};
  r.get("weight_min", s.weight_min);
  r.get("weight_max", s.weight_max);
  r.get("lateral_margin", s.lateral_margin);
  r.finish();
}

inline Json to_json(const HelixConfig& h) {
  return {{"center_x", h.center_x}, {"center_y", h.center_y},   {"radius", h.radius},
          {"z0", h.z0},             {"length", h.length},       {"turns", h.turns},
          {"molecules", h.molecules}, {"weight_min", h.weight_min}, {"weight_max", h.weight_max}};
}

inline void from_json(const Json& j, HelixConfig& h, const std::string& path = "helix") {
  ObjectReader r(j, path);
  r.get("center_x", h.center_x);
  r.get("center_y", h.center_y);
  r.get("radius", h.radius);
  r.get("z0", h.z0);
  r.get("length", h.length);
  r.get("turns", h.turns);
  r.get("molecules", h.molecules);
  r.get("weight_min", h.weight_min);
  r.get("weight_max", h.weight_max);
  r.finish();
}

inline Json to_json(const SolverConfig& c) {
  Json j{{"lambda_rel", c.lambda_rel},     {"max_iters", c.max_iters},       {"tol", c.tol},
         {"step_safety", c.step_safety},   {"nonneg", c.nonneg},             {"max_drift", c.max_drift},
         {"outer_rounds", c.outer_rounds}, {"estimate_drifts", c.estimate_drifts},
         {"local_search", c.local_search}, {"max_moves", c.max_moves},       {"max_trials", c.max_trials},
         {"kkt_tol", c.kkt_tol},           {"ws_initial", c.ws_initial}};
  j["lambda"] = c.lambda ? Json(*c.lambda) : Json(nullptr);
  return j;
}

/// `threads` is a run-time setting and is not part of the serialized config.
inline void from_json(const Json& j, SolverConfig& c, const std::string& path = "solver") {
  ObjectReader r(j, path);
  if (const Json* l = r.child("lambda")) {
    if (l->is_null()) c.lambda.reset();
    else if (l->is_number()) c.lambda = l->get<double>();
    else throw Error(ErrorKind::ConfigError, r.where("lambda") + ": expected a number or null");
  }
  r.get("lambda_rel", c.lambda_rel);
  r.get("max_iters", c.max_iters);
  r.get("tol", c.tol);
  r.get("step_safety", c.step_safety);
  r.get("nonneg", c.nonneg);
  r.get("max_drift", c.max_drift);
  r.get("outer_rounds", c.outer_rounds);
  r.get("estimate_drifts", c.estimate_drifts);
  r.get("local_search", c.local_search);
  r.get("max_moves", c.max_moves);
  r.get("max_trials", c.max_trials);
  r.get("kkt_tol", c.kkt_tol);
  r.get("ws_initial", c.ws_initial);
  r.finish();
}

inline Json to_json(const MatchConfig& c) {
  return {{"lateral_radius", c.lateral_radius}, {"axial_radius", c.axial_radius}, {"matching", to_string(c.matching)}};
}

inline void from_json(const Json& j, MatchConfig& c, const std::string& path = "match") {
  ObjectReader r(j, path);
  r.get("lateral_radius", c.lateral_radius);
  r.get("axial_radius", c.axial_radius);
  std::string m = to_string(c.matching);
  if (r.get("matching", m)) c.matching = match_mode_from_string(m);
  r.finish();
}

inline Json to_json(const DriftSet& d) {
  Json a = Json::array();
  for (const auto& s : d.shifts()) a.push_back({s.dx, s.dy});
  return a;
}

inline DriftSet drifts_from_json(const Json& j) {
  if (!j.is_array()) throw Error(ErrorKind::ParseError, "drifts: expected an array of [dx, dy] pairs");
  std::vector<LateralShift> v;
  for (const auto& e : j) {
    if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number_integer()) {
      throw Error(ErrorKind::ParseError, "drifts: expected [dx, dy] integer pairs");
    }
    v.push_back({e[0].get<int>(), e[1].get<int>()});
  }
  return DriftSet(std::move(v));
}

inline Json to_json(const SparseWeights& w) {
  return {{"index", w.index}, {"value", w.value}};
}

inline SparseWeights sparse_from_json(const Json& j) {
  SparseWeights w;
  try {
    w.index = j.at("index").get<std::vector<std::int64_t>>();
    w.value = j.at("value").get<std::vector<double>>();
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("sparse weights: ") + e.what());
  }
  if (w.index.size() != w.value.size()) throw Error(ErrorKind::ParseError, "sparse weights: length mismatch");
  return w;
}

inline Json to_json(const AlternatingState& s) {
  Json w = Json::array();
  for (const auto& x : s.weights) w.push_back(to_json(x));
  Json j{{"round", s.round},
         {"lambda", s.lambda},
         {"drifts", to_json(s.drifts)},
         {"weights", w},
         {"objective_trace", s.objective_trace},
         {"inner_iterations", s.inner_iterations},
         {"converged", s.converged}};
  j["local_optimum"] = s.local_optimum ? to_json(*s.local_optimum) : Json(nullptr);
  return j;
}

inline AlternatingState state_from_json(const Json& j) {
  AlternatingState s;
  try {
    s.round = j.at("round").get<int>();
    s.lambda = j.at("lambda").get<double>();
    s.drifts = drifts_from_json(j.at("drifts"));
    for (const auto& w : j.at("weights")) s.weights.push_back(sparse_from_json(w));
    s.objective_trace = j.at("objective_trace").get<std::vector<double>>();
    s.inner_iterations = j.at("inner_iterations").get<std::vector<int>>();
    s.converged = j.at("converged").get<bool>();
    if (!j.at("local_optimum").is_null()) s.local_optimum = drifts_from_json(j.at("local_optimum"));
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("checkpoint: ") + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Volumes: raw little-endian float32 + JSON sidecar
// ---------------------------------------------------------------------------

struct VolumeFile {
  Json meta;
  std::vector<double> data;
};

/// Writes `<base>.f32` and `<base>.json`. Index order is x fastest, then y,
/// then plane (images) or slice (weights).
inline void write_volume(const fs::path& base, std::span<const double> data, std::array<int, 3> dims,
                         const std::string& kind, const GridConfig& grid, const Json& extra = Json::object()) {
  if (std::size_t(dims[0]) * std::size_t(dims[1]) * std::size_t(dims[2]) != data.size()) {
    throw Error(ErrorKind::GridMismatch, "volume dims do not match the data length");
  }
  std::vector<char> bytes(data.size() * 4);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(static_cast<float>(data[i]));
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    std::memcpy(bytes.data() + 4 * i, &u, 4);
  }
  fs::path raw = base, side = base;
  raw += ".f32";
  side += ".json";
  write_bytes(raw, bytes);
  Json meta{{"format_version", kVolumeFormat},
            {"kind", kind},
            {"dims", dims},
            {"dtype", "float32"},
            {"byte_order", "little"},
            {"index_order", "x fastest, then y, then plane or slice"},
            {"grid", to_json(grid)},
            {"data_file", raw.filename().string()}};
  for (const auto& [k, v] : extra.items()) meta[k] = v;
  write_json(side, meta);
}

inline VolumeFile read_volume(const fs::path& base) {
  fs::path raw = base, side = base;
  raw += ".f32";
  side += ".json";
  VolumeFile v;
  v.meta = read_json(side);
  if (v.meta.value("format_version", "") != kVolumeFormat) {
    throw Error(ErrorKind::ParseError, side.string() + ": format_version is not " + kVolumeFormat);
  }
  const auto dims = v.meta.at("dims").get<std::array<int, 3>>();
  const std::size_t n = std::size_t(dims[0]) * std::size_t(dims[1]) * std::size_t(dims[2]);
  const std::string bytes = read_text(raw);
  if (bytes.size() != 4 * n) throw Error(ErrorKind::ParseError, raw.string() + ": size does not match dims");
  v.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t u;
    std::memcpy(&u, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    v.data[i] = double(std::bit_cast<float>(u));
  }
  return v;
}

inline void write_image(const fs::path& base, const LowResImage& y, const DriftSet& drifts) {
  write_volume(base, y.data, y.grid.low_dims, "image", y.grid, {{"drifts", to_json(drifts)}});
}

inline LowResImage read_image(const fs::path& base, const GridConfig& grid) {
  auto v = read_volume(base);
  GridConfig g;
  from_json(v.meta.at("grid"), g);
  if (!(g == grid) || v.meta.value("kind", "") != "image") {
    throw Error(ErrorKind::GridMismatch, base.string() + ": image grid differs from the dataset grid");
  }
  LowResImage y(grid);
  y.data = std::move(v.data);
  return y;
}

inline void write_weights(const fs::path& base, const WeightVolume& w) {
  write_volume(base, w.data, w.grid.high_dims, "weights", w.grid);
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? "" : s.substr(b, e - b + 1);
  }
  return out;
}

inline std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) return std::nullopt;
  return v;
}

// Rows of numbers; a first line that does not parse is taken as a header.
inline std::vector<std::vector<double>> read_numeric_csv(const fs::path& p, std::size_t columns) {
  std::istringstream in(read_text(p));
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    const auto f = split_csv_line(line);
    std::vector<double> row;
    bool ok = f.size() == columns;
    for (std::size_t k = 0; ok && k < f.size(); ++k) {
      const auto v = parse_double(f[k]);
      ok = v.has_value();
      if (ok) row.push_back(*v);
    }
    if (!ok) {
      if (rows.empty() && lineno == 1) continue;
      throw Error(ErrorKind::ParseError, p.string() + ":" + std::to_string(lineno) + ": expected " +
                                             std::to_string(columns) + " numeric columns");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

inline std::vector<WidthSample> read_width_csv(const fs::path& p) {
  std::vector<WidthSample> out;
  for (const auto& r : detail::read_numeric_csv(p, 2)) out.push_back({r[0], r[1]});
  return out;
}

inline void write_width_csv(const fs::path& p, std::span<const WidthSample> s) {
  std::string out = "depth_nm,width_nm\n";
  for (const auto& w : s) out += format_double(w.depth) + "," + format_double(w.width) + "\n";
  write_text(p, out);
}

/// frame, batch, x_nm, y_nm, z_nm, weight, voxel (nearest high-res voxel).
inline std::string ground_truth_csv(const Dataset& ds) {
  std::string out = "frame,batch,x_nm,y_nm,z_nm,weight,voxel\n";
  const GridConfig& g = ds.config.grid;
  for (std::size_t t = 0; t < ds.frames.size(); ++t) {
    for (const auto& m : ds.frames[t].scene.molecules) {
      const auto v = g.nearest_voxel(m.position);
      out += std::to_string(t) + "," + std::to_string(ds.frames[t].batch) + "," + format_double(m.position.x) + "," +
             format_double(m.position.y) + "," + format_double(m.position.z) + "," + format_double(m.weight) + "," +
             std::to_string(g.high_index(v[0], v[1], v[2])) + "\n";
    }
  }
  return out;
}

/// Per-frame scenes from a ground-truth CSV.
inline std::vector<Scene> read_ground_truth_csv(const fs::path& p, std::size_t frames) {
  std::vector<Scene> out(frames);
  for (const auto& r : detail::read_numeric_csv(p, 7)) {
    const auto t = std::size_t(r[0]);
    if (r[0] < 0 || t >= frames) throw Error(ErrorKind::ParseError, p.string() + ": frame index out of range");
    out[t].molecules.push_back({{r[2], r[3], r[4]}, r[5]});
  }
  return out;
}

/// frame, voxel, weight for every nonzero.
inline std::string weights_csv(std::span<const SparseWeights> ws, std::size_t first_frame = 0) {
  std::string out = "frame,voxel,weight\n";
  for (std::size_t t = 0; t < ws.size(); ++t)
    for (std::size_t k = 0; k < ws[t].nnz(); ++k)
      out += std::to_string(first_frame + t) + "," + std::to_string(ws[t].index[k]) + "," +
             format_double(ws[t].value[k]) + "\n";
  return out;
}

inline std::vector<SparseWeights> read_weights_csv(const fs::path& p, std::size_t frames) {
  std::vector<SparseWeights> out(frames);
  for (const auto& r : detail::read_numeric_csv(p, 3)) {
    const auto t = std::size_t(r[0]);
    if (r[0] < 0 || t >= frames) throw Error(ErrorKind::ParseError, p.string() + ": frame index out of range");
    out[t].index.push_back(std::int64_t(r[1]));
    out[t].value.push_back(r[2]);
  }
  return out;
}

inline std::string error_report_csv(const ErrorReport& rep) {
  std::string out = "bin_lo_nm,bin_hi_nm,matched,missed,spurious,mean_x_nm,ci_x_nm,mean_y_nm,ci_y_nm,mean_z_nm,ci_z_nm\n";
  auto num = [](double v) { return std::isfinite(v) ? format_double(v) : std::string("nan"); };
  auto row = [&](const BinErrors& b, const std::string& lo, const std::string& hi) {
    out += lo + "," + hi + "," + std::to_string(b.matched) + "," + std::to_string(b.missed) + "," +
           std::to_string(b.spurious);
    for (const auto& a : b.axes) out += "," + (b.empty ? "nan" : num(a.mean)) + "," + num(a.ci);
    out += "\n";
  };
  for (const auto& b : rep.bins) row(b, format_double(b.depth_lo), format_double(b.depth_hi));
  row(rep.overall, "all", "all");
  return out;
}

inline Json to_json(const ErrorReport& rep) {
  auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
  auto bin = [&](const BinErrors& b) {
    Json axes = Json::object();
    const char* names[3] = {"x", "y", "z"};
    for (std::size_t a = 0; a < 3; ++a) {
      axes[names[a]] = {{"mean_nm", b.empty ? Json(nullptr) : num(b.axes[a].mean)}, {"ci_nm", num(b.axes[a].ci)}};
    }
    return Json{{"depth_lo_nm", b.depth_lo}, {"depth_hi_nm", b.depth_hi}, {"matched", b.matched},
                {"missed", b.missed},        {"spurious", b.spurious},    {"empty", b.empty},
                {"axes", axes}};
  };
  Json bins = Json::array();
  for (const auto& b : rep.bins) bins.push_back(bin(b));
  return {{"bins", bins}, {"overall", bin(rep.overall)}, {"jaccard", rep.jaccard}};
}

inline std::string timing_csv(const TimingReport& rep) {
  std::string out = "label,pixels,fps,reference\n";
  for (const auto& r : rep.rows) {
    out += r.label + "," + std::to_string(r.pixels) + "," + format_double(r.fps) + "," + (r.reference ? "1" : "0") + "\n";
  }
  return out;
}

/// Binary 8-bit PGM (P5).
inline void write_pgm(const fs::path& p, std::span<const std::uint8_t> pixels, int width, int height) {
  if (std::size_t(width) * std::size_t(height) != pixels.size()) {
    throw Error(ErrorKind::GridMismatch, "pgm size does not match the pixel count");
  }
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  write_text(p, out);
}

}  // namespace mumloc

#endif  // MUMLOC_IO_HPP
