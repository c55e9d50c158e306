#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qlab/matrix.hpp"

namespace qlab {

enum class FormatFamily { mx_int, mx_fp, plain_int };
enum class IntGranularity { per_tensor, per_group, per_channel };

// Descriptor for one quantized data type. MX families carry a block size K
// whose elements share an e8m0 power-of-two scale; plain_int carries a
// granularity for calibrated float scales instead.
struct QuantFormat {
  FormatFamily family = FormatFamily::mx_int;
  int precision_bits = 0;  // P, total bits per element
  int exp_bits = 0;        // E, mx_fp only
  int man_bits = 0;        // M, mx_fp only
  int block_size = 0;      // K, MX families only
  IntGranularity granularity = IntGranularity::per_tensor;  // plain_int only
  int group_size = 0;                                       // G, per_group only

  bool operator==(const QuantFormat&) const = default;
};

bool is_mx(const QuantFormat& f);

// Grammar: mxint<P>_<K> | mxfp<P>_e<E>m<M>_<K> | int<P>_tens | int<P>_chan |
// int<P>_g<G>. Throws std::invalid_argument on malformed names.
QuantFormat parse_format(const std::string& name);
std::string format_name(const QuantFormat& f);

// Sorted ascending list of representable element values, symmetric about 0.
// mx_int: integers in [-(2^(P-1)-1), 2^(P-1)-1]. mx_fp: signed minifloats with
// bias 2^(E-1)-1, exponent code 0 subnormal, no inf/NaN codes. Throws on
// plain_int, whose grid depends on a calibrated scale.
std::vector<double> element_grid(const QuantFormat& f);
double grid_max(const QuantFormat& f);

// Bits per stored weight including scale overhead: P + 8/K. MX only.
double effective_bits(const QuantFormat& f);

// Quantized matrix. codes hold grid indices (into element_grid for MX, into
// the integer grid [-qmax, qmax] for plain_int). MX scales are e8m0 codes,
// value 2^(code-127), one per block of K columns per row; plain_int scales
// are calibrated floats, one per granule.
struct QuantizedTensor {
  QuantFormat format;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> scale_codes;  // MX, rows * ceil(cols/K)
  std::vector<float> scales;              // plain_int granule scales
  std::vector<std::uint8_t> codes;        // rows * cols grid indices

  std::size_t blocks_per_row() const;
};

// Round-to-nearest quantization onto an MX format. Per block, the scale is
// the smallest power of two 2^e with gmax*2^e >= max|block| (e = -127 with
// zero codes for an all-zero block), exponent clamped to [-127, 127]; element
// codes round to the nearest grid value with ties to the even grid index.
// The minimal-e rule means no element clips unless the exponent clamped.
QuantizedTensor rtn_quantize(const MatF& w, const QuantFormat& f);

MatF dequantize(const QuantizedTensor& q);

// Packed on-disk layout: header (format name, rows, cols), row-major scale
// codes one byte each, then per row the element bit codes packed MSB-first at
// P bits each, zero-padded to a byte boundary. MX only.
void save_packed(const QuantizedTensor& q, const std::string& path);
QuantizedTensor load_packed(const std::string& path);

// Number of scale entries a rows-by-cols tensor carries in this format:
// rows * ceil(cols/K) for MX; 1, rows, or rows*(cols/G) for plain_int.
std::size_t quantized_scale_count(const QuantFormat& f, std::size_t rows,
                                  std::size_t cols);

// Smallest e in [-127, 127] with gmax*2^e >= maxabs; -127 when maxabs == 0.
// Comparisons use exact ldexp arithmetic so no rounding slop near powers of
// two can pick a clipping scale.
int scale_exponent(double maxabs, double gmax);

// Index of the grid value nearest to t; exact midpoints resolve to the even
// index. grid must be sorted ascending.
int nearest_grid_index(const std::vector<double>& grid, double t);

}  // namespace qlab
