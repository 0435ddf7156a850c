#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meddiff/config.hpp"
#include "meddiff/diffusion.hpp"
#include "meddiff/embedder.hpp"
#include "meddiff/encoder.hpp"
#include "meddiff/predictor.hpp"
#include "meddiff/rng.hpp"

namespace meddiff {

struct ModelDims {
    int M = 0;       // vocabulary size
    int d_e = 256;   // embedding size
    int d_h = 256;   // hidden size
    int d_f = 64;    // time-feature size
    int d_b = 64;    // attention bottleneck
    int d_s = 32;    // step-encoding size
};

struct ModelParams {
    EmbedderParams embed;
    LstmParams lstm;
    FusionParams fusion;
    NoisePredictorParams noise;
    HeadParams head;
};

// Flat view of one tensor; data is the Eigen buffer (column-major).
struct TensorRef {
    std::string name;   // group-prefixed, e.g. "embed.W_v"
    double* data;
    long rows, cols;
    long size() const { return rows * cols; }
};

// Fixed traversal order shared by init, Adam, checkpoints, and flattening.
std::vector<TensorRef> tensor_refs(ModelParams& params);

ModelParams make_zero_model(const ModelDims& dims);

// Uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] per tensor, drawn in traversal
// order from a single stream.
ModelParams init_model(const ModelDims& dims, RngStream rng);

ModelDims dims_from_kv(const KvMap& kv);

long parameter_count(ModelParams& params);

// Versioned container: text header with config lines and tensor shapes, then
// raw little-endian doubles in traversal order. Reload is bit-identical.
void save_checkpoint(const std::string& path, const KvMap& config, ModelParams& params);

struct Checkpoint {
    KvMap config;
    ModelParams params;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace meddiff
