#pragma once

// File formats: the parameter snapshot (little-endian binary: magic,
// version, then per-tensor name/shape/float64 payload), CSV metrics and
// evaluation streams, and 8-bit binary PGM (P5) images.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cgraph/model.hpp"
#include "cgraph/train.hpp"

namespace cgraph {

inline constexpr char kParamsMagic[4] = {'C', 'G', 'P', 'B'};
inline constexpr std::uint32_t kParamsVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

// Fixed 9-significant-digit decimal formatting shared by every text export.
inline std::string fmt_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parameter snapshots
// ---------------------------------------------------------------------------

template <class T>
void save_params(const ModelParams<T>& p, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kParamsMagic, 4);
  detail::put_u32(os, kParamsVersion);
  std::uint32_t count = 0;
  visit_params(const_cast<ModelParams<T>&>(p), [&](const std::string&, Tensor<T>&) { ++count; });
  detail::put_u32(os, count);
  visit_params(const_cast<ModelParams<T>&>(p), [&](const std::string& name, Tensor<T>& t) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) detail::put_u32(os, static_cast<std::uint32_t>(t.dim(d)));
    for (T v : t.data()) detail::put_f64(os, static_cast<double>(v));
  });
  if (!os) throw IoError("write failed: " + path);
}

// Loads into a params struct already shaped by init_params for the same
// configuration; names and shapes must match the snapshot exactly.
template <class T>
void load_params(ModelParams<T>& p, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kParamsMagic, 4) != 0)
    throw IoError("bad parameter file magic in " + path);
  const std::uint32_t version = detail::get_u32(is);
  if (version != kParamsVersion)
    throw IoError("parameter file version " + std::to_string(version) + " in " + path +
                  ", this build reads version " + std::to_string(kParamsVersion));
  const std::uint32_t count = detail::get_u32(is);
  std::uint32_t expected = 0;
  visit_params(p, [&](const std::string&, Tensor<T>&) { ++expected; });
  if (count != expected)
    throw IoError("parameter count mismatch: file has " + std::to_string(count) +
                  ", model expects " + std::to_string(expected));
  visit_params(p, [&](const std::string& name, Tensor<T>& t) {
    const std::uint32_t len = detail::get_u32(is);
    std::string fname(len, '\0');
    is.read(fname.data(), len);
    if (fname != name)
      throw IoError("parameter name mismatch: file has '" + fname + "', model expects '" + name + "'");
    const std::uint32_t rank = detail::get_u32(is);
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(detail::get_u32(is)));
    if (shape != t.shape())
      throw IoError("parameter shape mismatch for '" + name + "'");
    std::vector<T> data(static_cast<std::size_t>(numel(shape)));
    for (auto& v : data) v = static_cast<T>(detail::get_f64(is));
    t = Tensor<T>::from(shape, std::move(data));
  });
  if (!is) throw IoError("truncated parameter file: " + path);
}

// ---------------------------------------------------------------------------
// CSV streams
// ---------------------------------------------------------------------------

inline void write_metrics_csv(const std::vector<MetricsRecord>& metrics, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "iter,loss_seg,loss_cnc,loss_total,lr\n";
  for (const auto& m : metrics)
    os << m.iter << ',' << detail::fmt_g9(m.seg) << ',' << detail::fmt_g9(m.cnc) << ','
       << detail::fmt_g9(m.total) << ',' << detail::fmt_g9(m.lr) << '\n';
}

inline void write_eval_csv(const EvalSummary& summary, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "episode,class,domain,dsc\n";
  for (const auto& r : summary.rows)
    os << r.episode << ',' << r.class_id << ',' << r.domain_id << ',' << detail::fmt_g9(r.dsc) << '\n';
}

// ---------------------------------------------------------------------------
// PGM (P5) export
// ---------------------------------------------------------------------------

inline void write_pgm(const std::vector<std::uint8_t>& pixels, int h, int w,
                      const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

inline void write_pgm_gray(const std::vector<double>& gray, int h, int w, const std::string& path) {
  std::vector<std::uint8_t> px(gray.size());
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const double v = std::min(std::max(gray[i], 0.0), 1.0);
    px[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  write_pgm(px, h, w, path);
}

}  // namespace cgraph
