#include "qlab/formats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string_view>

namespace qlab {
namespace {

constexpr char kPackMagic[4] = {'Q', 'P', 'K', '1'};

bool take(std::string_view& s, std::string_view prefix) {
  if (s.substr(0, prefix.size()) != prefix) return false;
  s.remove_prefix(prefix.size());
  return true;
}

// Canonical decimal integer: digits only, no sign, no leading zero. Keeps
// parse_format a strict inverse of format_name.
bool take_int(std::string_view& s, int& out) {
  std::size_t n = 0;
  while (n < s.size() && s[n] >= '0' && s[n] <= '9') ++n;
  if (n == 0 || n > 4) return false;
  if (s[0] == '0' && n > 1) return false;
  int v = 0;
  for (std::size_t i = 0; i < n; ++i) v = v * 10 + (s[i] - '0');
  s.remove_prefix(n);
  out = v;
  return true;
}

bool valid_block(int k) { return k == 16 || k == 32 || k == 64 || k == 128; }

[[noreturn]] void bad_format(const std::string& name) {
  throw std::invalid_argument("malformed format name: " + name);
}

int int_qmax(const QuantFormat& f) { return (1 << (f.precision_bits - 1)) - 1; }

// Grid values paired with their canonical bit codes (two's complement for
// int elements, sign|exponent|mantissa for minifloats), sorted ascending.
struct GridCodes {
  std::vector<double> values;
  std::vector<std::uint16_t> codes;
};

GridCodes grid_with_codes(const QuantFormat& f) {
  GridCodes g;
  if (f.family == FormatFamily::mx_int) {
    const int qmax = int_qmax(f);
    const unsigned mask = (1u << f.precision_bits) - 1;
    for (int v = -qmax; v <= qmax; ++v) {
      g.values.push_back(static_cast<double>(v));
      g.codes.push_back(static_cast<std::uint16_t>(static_cast<unsigned>(v) & mask));
    }
    return g;
  }
  if (f.family != FormatFamily::mx_fp) {
    throw std::invalid_argument(
        "element grid undefined for calibrated int formats");
  }
  const int E = f.exp_bits, M = f.man_bits;
  const int bias = (1 << (E - 1)) - 1;
  std::vector<double> mag;
  std::vector<std::uint16_t> magcode;
  for (int m = 0; m < (1 << M); ++m) {
    mag.push_back(std::ldexp(static_cast<double>(m), 1 - bias - M));
    magcode.push_back(static_cast<std::uint16_t>(m));
  }
  for (int e = 1; e < (1 << E); ++e) {
    for (int m = 0; m < (1 << M); ++m) {
      mag.push_back(std::ldexp(static_cast<double>((1 << M) + m), e - bias - M));
      magcode.push_back(static_cast<std::uint16_t>((e << M) | m));
    }
  }
  const std::uint16_t sign_bit = static_cast<std::uint16_t>(1u << (E + M));
  for (std::size_t i = mag.size(); i-- > 1;) {
    g.values.push_back(-mag[i]);
    g.codes.push_back(static_cast<std::uint16_t>(sign_bit | magcode[i]));
  }
  for (std::size_t i = 0; i < mag.size(); ++i) {
    g.values.push_back(mag[i]);
    g.codes.push_back(magcode[i]);
  }
  return g;
}

std::size_t scale_count(const QuantFormat& f, std::size_t rows,
                        std::size_t cols) {
  switch (f.family) {
    case FormatFamily::mx_int:
    case FormatFamily::mx_fp:
      return rows * ((cols + f.block_size - 1) / f.block_size);
    case FormatFamily::plain_int:
      switch (f.granularity) {
        case IntGranularity::per_tensor: return 1;
        case IntGranularity::per_channel: return rows;
        case IntGranularity::per_group: return rows * (cols / f.group_size);
      }
  }
  return 0;
}

void wr_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void wr_u32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  wr_bytes(out, b, 4);
}

void wr_u64(std::ofstream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  wr_bytes(out, b, 8);
}

void rd_bytes(std::ifstream& in, void* p, std::size_t n,
              const std::string& path) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n))
    throw std::runtime_error("truncated packed tensor file: " + path);
}

std::uint32_t rd_u32(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  rd_bytes(in, b, 4, path);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t rd_u64(std::ifstream& in, const std::string& path) {
  unsigned char b[8];
  rd_bytes(in, b, 8, path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

bool is_mx(const QuantFormat& f) { return f.family != FormatFamily::plain_int; }

QuantFormat parse_format(const std::string& name) {
  std::string_view s(name);
  QuantFormat f;
  if (take(s, "mxint")) {
    f.family = FormatFamily::mx_int;
    if (!take_int(s, f.precision_bits) || !take(s, "_") ||
        !take_int(s, f.block_size) || !s.empty())
      bad_format(name);
    if (f.precision_bits < 2 || f.precision_bits > 8 ||
        !valid_block(f.block_size))
      bad_format(name);
    return f;
  }
  if (take(s, "mxfp")) {
    f.family = FormatFamily::mx_fp;
    if (!take_int(s, f.precision_bits) || !take(s, "_e") ||
        !take_int(s, f.exp_bits) || !take(s, "m") || !take_int(s, f.man_bits) ||
        !take(s, "_") || !take_int(s, f.block_size) || !s.empty())
      bad_format(name);
    if (f.precision_bits != 1 + f.exp_bits + f.man_bits || f.exp_bits < 1 ||
        f.man_bits < 0 || f.precision_bits > 8 || !valid_block(f.block_size))
      bad_format(name);
    return f;
  }
  if (take(s, "int")) {
    f.family = FormatFamily::plain_int;
    if (!take_int(s, f.precision_bits) || !take(s, "_")) bad_format(name);
    if (f.precision_bits < 2 || f.precision_bits > 8) bad_format(name);
    if (s == "tens") {
      f.granularity = IntGranularity::per_tensor;
    } else if (s == "chan") {
      f.granularity = IntGranularity::per_channel;
    } else if (take(s, "g") && take_int(s, f.group_size) && s.empty() &&
               f.group_size > 0) {
      f.granularity = IntGranularity::per_group;
    } else {
      bad_format(name);
    }
    return f;
  }
  bad_format(name);
}

std::string format_name(const QuantFormat& f) {
  char buf[48];
  switch (f.family) {
    case FormatFamily::mx_int:
      std::snprintf(buf, sizeof buf, "mxint%d_%d", f.precision_bits,
                    f.block_size);
      return buf;
    case FormatFamily::mx_fp:
      std::snprintf(buf, sizeof buf, "mxfp%d_e%dm%d_%d", f.precision_bits,
                    f.exp_bits, f.man_bits, f.block_size);
      return buf;
    case FormatFamily::plain_int:
      switch (f.granularity) {
        case IntGranularity::per_tensor:
          std::snprintf(buf, sizeof buf, "int%d_tens", f.precision_bits);
          return buf;
        case IntGranularity::per_channel:
          std::snprintf(buf, sizeof buf, "int%d_chan", f.precision_bits);
          return buf;
        case IntGranularity::per_group:
          std::snprintf(buf, sizeof buf, "int%d_g%d", f.precision_bits,
                        f.group_size);
          return buf;
      }
  }
  throw std::invalid_argument("invalid format descriptor");
}

std::vector<double> element_grid(const QuantFormat& f) {
  return grid_with_codes(f).values;
}

double grid_max(const QuantFormat& f) { return element_grid(f).back(); }

double effective_bits(const QuantFormat& f) {
  if (!is_mx(f))
    throw std::invalid_argument(
        "effective_bits is defined for MX formats only");
  return f.precision_bits + 8.0 / f.block_size;
}

std::size_t QuantizedTensor::blocks_per_row() const {
  if (!is_mx(format)) throw std::logic_error("blocks_per_row needs MX format");
  return (cols + format.block_size - 1) / format.block_size;
}

int scale_exponent(double maxabs, double gmax) {
  if (maxabs == 0.0) return -127;
  int e = 0;
  std::frexp(maxabs / gmax, &e);
  while (std::ldexp(gmax, e) < maxabs) ++e;
  while (std::ldexp(gmax, e - 1) >= maxabs) --e;
  return std::clamp(e, -127, 127);
}

int nearest_grid_index(const std::vector<double>& grid, double t) {
  const auto it = std::lower_bound(grid.begin(), grid.end(), t);
  if (it == grid.begin()) return 0;
  if (it == grid.end()) return static_cast<int>(grid.size()) - 1;
  const int hi = static_cast<int>(it - grid.begin());
  const int lo = hi - 1;
  // Element values carry few mantissa bits, so their midpoint is exact and
  // the tie test is free of rounding slop.
  const double mid = 0.5 * (grid[lo] + grid[hi]);
  if (t < mid) return lo;
  if (t > mid) return hi;
  return (lo % 2 == 0) ? lo : hi;
}

QuantizedTensor rtn_quantize(const MatF& w, const QuantFormat& f) {
  if (!is_mx(f))
    throw std::invalid_argument("rtn_quantize handles MX formats only");
  if (w.rows == 0 || w.cols == 0)
    throw std::invalid_argument("rtn_quantize on empty tensor");
  for (float v : w.a)
    if (!std::isfinite(v))
      throw std::invalid_argument("rtn_quantize on non-finite input");

  const std::vector<double> grid = element_grid(f);
  const double gmax = grid.back();
  const int zero_idx = nearest_grid_index(grid, 0.0);
  const std::size_t K = static_cast<std::size_t>(f.block_size);
  const std::size_t nblk = (w.cols + K - 1) / K;

  QuantizedTensor q;
  q.format = f;
  q.rows = w.rows;
  q.cols = w.cols;
  q.scale_codes.resize(w.rows * nblk);
  q.codes.resize(w.rows * w.cols);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const float* wr = w.row(r);
    for (std::size_t b = 0; b < nblk; ++b) {
      const std::size_t c0 = b * K;
      const std::size_t c1 = std::min(w.cols, c0 + K);
      double maxabs = 0.0;
      for (std::size_t c = c0; c < c1; ++c)
        maxabs = std::max(maxabs, std::abs(static_cast<double>(wr[c])));
      const int e = scale_exponent(maxabs, gmax);
      q.scale_codes[r * nblk + b] = static_cast<std::uint8_t>(e + 127);
      std::uint8_t* qc = q.codes.data() + r * w.cols;
      if (maxabs == 0.0) {
        for (std::size_t c = c0; c < c1; ++c)
          qc[c] = static_cast<std::uint8_t>(zero_idx);
        continue;
      }
      for (std::size_t c = c0; c < c1; ++c) {
        const double t = std::ldexp(static_cast<double>(wr[c]), -e);
        qc[c] = static_cast<std::uint8_t>(nearest_grid_index(grid, t));
      }
    }
  }
  return q;
}

MatF dequantize(const QuantizedTensor& q) {
  MatF out(q.rows, q.cols);
  if (is_mx(q.format)) {
    const std::vector<double> grid = element_grid(q.format);
    const std::size_t nblk = q.blocks_per_row();
    const std::size_t K = static_cast<std::size_t>(q.format.block_size);
    for (std::size_t r = 0; r < q.rows; ++r) {
      for (std::size_t c = 0; c < q.cols; ++c) {
        const int e = static_cast<int>(q.scale_codes[r * nblk + c / K]) - 127;
        out.at(r, c) = static_cast<float>(
            std::ldexp(grid[q.codes[r * q.cols + c]], e));
      }
    }
    return out;
  }
  const int qmax = int_qmax(q.format);
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t c = 0; c < q.cols; ++c) {
      std::size_t g = 0;
      switch (q.format.granularity) {
        case IntGranularity::per_tensor: g = 0; break;
        case IntGranularity::per_channel: g = r; break;
        case IntGranularity::per_group:
          g = r * (q.cols / q.format.group_size) + c / q.format.group_size;
          break;
      }
      const int code = static_cast<int>(q.codes[r * q.cols + c]) - qmax;
      out.at(r, c) = static_cast<float>(code * static_cast<double>(q.scales[g]));
    }
  }
  return out;
}

void save_packed(const QuantizedTensor& q, const std::string& path) {
  if (!is_mx(q.format))
    throw std::invalid_argument("packed layout covers MX tensors only");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);

  const std::string name = format_name(q.format);
  wr_bytes(out, kPackMagic, 4);
  wr_u32(out, static_cast<std::uint32_t>(name.size()));
  wr_bytes(out, name.data(), name.size());
  wr_u64(out, q.rows);
  wr_u64(out, q.cols);
  wr_bytes(out, q.scale_codes.data(), q.scale_codes.size());

  const GridCodes g = grid_with_codes(q.format);
  const int P = q.format.precision_bits;
  std::vector<unsigned char> packed;
  packed.reserve((q.cols * P / 8 + 1) * q.rows);
  for (std::size_t r = 0; r < q.rows; ++r) {
    std::uint32_t acc = 0;
    int nbits = 0;
    for (std::size_t c = 0; c < q.cols; ++c) {
      acc = (acc << P) | g.codes[q.codes[r * q.cols + c]];
      nbits += P;
      while (nbits >= 8) {
        packed.push_back(static_cast<unsigned char>(acc >> (nbits - 8)));
        nbits -= 8;
      }
    }
    if (nbits > 0)
      packed.push_back(static_cast<unsigned char>((acc << (8 - nbits)) & 0xff));
  }
  wr_bytes(out, packed.data(), packed.size());
  if (!out) throw std::runtime_error("write failed: " + path);
}

QuantizedTensor load_packed(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);

  char magic[4];
  rd_bytes(in, magic, 4, path);
  if (!std::equal(magic, magic + 4, kPackMagic))
    throw std::runtime_error("not a packed tensor file: " + path);
  const std::uint32_t name_len = rd_u32(in, path);
  if (name_len == 0 || name_len > 64)
    throw std::runtime_error("corrupt header in " + path);
  std::string name(name_len, '\0');
  rd_bytes(in, name.data(), name_len, path);

  QuantizedTensor q;
  q.format = parse_format(name);
  if (!is_mx(q.format))
    throw std::runtime_error("packed layout covers MX tensors only: " + path);
  q.rows = rd_u64(in, path);
  q.cols = rd_u64(in, path);
  if (q.rows == 0 || q.cols == 0 || q.rows > (1u << 24) || q.cols > (1u << 24))
    throw std::runtime_error("corrupt shape in " + path);
  const std::size_t nblk = q.blocks_per_row();
  q.scale_codes.resize(q.rows * nblk);
  rd_bytes(in, q.scale_codes.data(), q.scale_codes.size(), path);

  const GridCodes g = grid_with_codes(q.format);
  const int P = q.format.precision_bits;
  std::vector<int> code_to_index(std::size_t{1} << P, -1);
  for (std::size_t i = 0; i < g.codes.size(); ++i)
    code_to_index[g.codes[i]] = static_cast<int>(i);

  q.codes.resize(q.rows * q.cols);
  const std::size_t row_bytes = (q.cols * static_cast<std::size_t>(P) + 7) / 8;
  std::vector<unsigned char> buf(row_bytes);
  for (std::size_t r = 0; r < q.rows; ++r) {
    rd_bytes(in, buf.data(), row_bytes, path);
    std::uint32_t acc = 0;
    int nbits = 0;
    std::size_t byte = 0;
    for (std::size_t c = 0; c < q.cols; ++c) {
      while (nbits < P) {
        acc = (acc << 8) | buf[byte++];
        nbits += 8;
      }
      const std::uint32_t code = (acc >> (nbits - P)) & ((1u << P) - 1);
      nbits -= P;
      const int idx = code_to_index[code];
      if (idx < 0)
        throw std::runtime_error("invalid element code in " + path);
      q.codes[r * q.cols + c] = static_cast<std::uint8_t>(idx);
    }
  }
  return q;
}

std::size_t quantized_scale_count(const QuantFormat& f, std::size_t rows,
                                  std::size_t cols) {
  return scale_count(f, rows, cols);
}

}  // namespace qlab
