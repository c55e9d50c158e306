#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qlab/matrix.hpp"

namespace qlab {

struct ToyConfig {
  int vocab = 256;  // byte tokenizer
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int ctx_len = 64;
  int mlp_ratio = 4;

  bool operator==(const ToyConfig&) const = default;
};

// Size presets s1..s4, a small model family for scaling and predictor runs.
ToyConfig preset_config(const std::string& name);
const std::vector<std::string>& preset_names();

struct LayerWeights {
  MatF ln1_g, ln1_b;        // 1 x d
  MatF wq, wk, wv, wo;      // d x d, output rows by input columns
  MatF ln2_g, ln2_b;        // 1 x d
  MatF w_in;                // (mlp_ratio*d) x d
  MatF w_out;               // d x (mlp_ratio*d)
};

// Weights at rest are float32. The quantizable set is exactly the six
// per-layer matrices wq, wk, wv, wo, w_in, w_out; embeddings, the
// unembedding, and layer norms stay out of it.
struct ToyCheckpoint {
  ToyConfig config;
  std::uint64_t seed = 0;
  int steps = 0;
  double train_nll = 0.0;
  double valid_nll = 0.0;
  MatF tok_emb;  // vocab x d
  MatF pos_emb;  // ctx x d
  std::vector<LayerWeights> layers;
  MatF lnf_g, lnf_b;  // 1 x d
  MatF unemb;         // vocab x d
};

enum class Split { train, valid };

// Non-overlapping byte sequences of ctx_len+1, split 90/10 by a seeded
// shuffle; split index lists are kept sorted so reductions have one
// canonical order.
struct TokenDataset {
  int seq_len = 0;  // ctx_len + 1
  std::vector<std::uint8_t> data;
  std::vector<std::uint32_t> train_idx, valid_idx;

  std::size_t n_seqs() const { return data.size() / static_cast<std::size_t>(seq_len); }
  const std::vector<std::uint32_t>& split_indices(Split s) const {
    return s == Split::train ? train_idx : valid_idx;
  }
  const std::uint8_t* seq(std::uint32_t i) const {
    return data.data() + static_cast<std::size_t>(i) * seq_len;
  }
};

TokenDataset make_dataset(std::span<const std::uint8_t> corpus, int ctx_len,
                          std::uint64_t seed);

// The dataset a checkpoint was trained against: same corpus, context length,
// and the split stream derived from the training seed.
TokenDataset dataset_for(const ToyCheckpoint& ckpt,
                         std::span<const std::uint8_t> corpus);

struct TrainOptions {
  int steps = 2000;
  int batch_size = 16;
  double lr = 3e-3;
};

// Adam training from a seeded init; deterministic given (corpus, config,
// options, seed). Throws with the step index if the loss leaves the finite
// range. Requires at least 1e5 corpus bytes.
ToyCheckpoint train(std::span<const std::uint8_t> corpus, const ToyConfig& cfg,
                    const TrainOptions& opt, std::uint64_t seed);

// A checkpoint plus a replacement of the quantizable set, held in double
// precision so perturbation studies are not re-rounded through float32.
struct ModelView {
  const ToyCheckpoint* base = nullptr;
  std::vector<double> quantizable;  // flatten order
};

std::size_t quantizable_count(const ToyConfig& cfg);  // D
std::vector<std::pair<std::string, const MatF*>> quantizable_tensors(
    const ToyCheckpoint& ckpt);
std::vector<double> flatten_quantizable(const ToyCheckpoint& ckpt);
ModelView make_view(const ToyCheckpoint& ckpt);
ModelView apply_weights(const ToyCheckpoint& ckpt, std::span<const double> w);
ToyCheckpoint materialize(const ModelView& view);

// Mean next-token cross entropy in nats over every token of the split,
// accumulated in double over the canonical sequence order.
double eval_nll(const ModelView& view, const TokenDataset& ds, Split split);
double eval_nll(const ToyCheckpoint& ckpt, const TokenDataset& ds, Split split);

// Analytic reverse-mode gradient of the split NLL restricted to the
// quantizable set, in flatten order.
std::vector<double> grad_nll(const ModelView& view, const TokenDataset& ds,
                             Split split);

// Hessian-vector product via a central difference of gradients with step
// 1e-4 * ||w|| along v/||v||, rescaled by ||v||.
std::vector<double> hvp(const ModelView& view, std::span<const double> v,
                        const TokenDataset& ds, Split split);

// The same finite-difference core against any gradient function; the
// quadratic test fixture drives this directly.
std::vector<double> hvp_fd(
    const std::function<std::vector<double>(std::span<const double>)>& grad_fn,
    std::span<const double> w, std::span<const double> v);

// Checkpoint container: manifest.json plus weights.bin of row-major
// little-endian float32 tensors; round-trips bit-exactly.
// Second moments of the inputs feeding each quantizable matrix, accumulated
// as sums of x x^T over the token positions of the first max_seqs training
// sequences (canonical ascending order). One cols x cols matrix per entry of
// quantizable_tensors().
struct CalibCapture {
  std::vector<MatD> second_moments;
  std::size_t n_samples = 0;  // token positions per matrix
};
CalibCapture capture_second_moments(const ToyCheckpoint& ckpt,
                                    const TokenDataset& ds,
                                    std::size_t max_seqs = 128);

void save_checkpoint(const ToyCheckpoint& ckpt, const std::string& dir);
ToyCheckpoint load_checkpoint(const std::string& dir);

// Hex digest over config, training metadata, and raw weight bytes.
std::string checkpoint_hash(const ToyCheckpoint& ckpt);

// Deterministic pseudo-text: seeded word vocabulary with a Zipf-like rank
// distribution, sentence punctuation, and newlines. Gives the byte-level
// model a learnable corpus without shipping one.
std::vector<std::uint8_t> synthetic_corpus(std::size_t n_bytes,
                                           std::uint64_t seed);

}  // namespace qlab
