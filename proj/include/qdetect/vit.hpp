#pragma once

// Simplified Vision Transformer: patch embedding with a class token and
// learned position embeddings, L blocks of
//     z_l = ReLU(Linear(BN(MSA(z_{l-1}) + z_{l-1}))) + (MSA(z_{l-1}) + z_{l-1})
// and a head y = Linear(BN(z_L^0)). Training uses hand-written backprop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qdetect/dataset.hpp"

namespace qdetect::io {
class ByteWriter;
class ByteReader;
} // namespace qdetect::io

namespace qdetect::vit {

using Mat = Eigen::MatrixXd;
using Row = Eigen::RowVectorXd;

struct VitConfig {
    int height = 12;
    int width = 24;
    int patch = 6;       // P
    int latent_dim = 16; // D
    int n_heads = 8;
    int n_layers = 1;    // L
    int n_classes = 8;
    // Literal reading: every head projects D -> D and the head outputs are
    // summed before W_O. Default: d = D / n_heads and heads are concatenated.
    bool literal_heads = false;
    double learning_rate = 0.05;
    double momentum = 0.9;
    int batch_size = 128;
    int epochs = 30;
    std::uint64_t seed = 1;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;

    // Throws ConfigError.
    void validate() const;
    int patch_area() const { return patch * patch; }
    int n_patches() const { return height * width / patch_area(); }
    int tokens() const { return n_patches() + 1; }
    int head_dim() const { return literal_heads ? latent_dim : latent_dim / n_heads; }

    // Defaults for an image geometry: P = 5 for 10x10, P = 6 otherwise.
    static VitConfig for_images(int height, int width, int n_ions);

    friend bool operator==(const VitConfig&, const VitConfig&) = default;
};

// Vectors are stored as 1 x D matrices so every tensor has one type.
struct BatchNorm {
    Mat gamma, beta;
    Mat mean, var; // running statistics
};

struct HeadParams {
    Mat wq, wk, wv; // D x d
};

struct BlockParams {
    std::vector<HeadParams> heads;
    Mat wo; // (n_heads*d or D) x D
    BatchNorm bn;
    Mat w1; // D x D
    Mat b1;
};

struct VitParams {
    Mat embed;   // P^2 x D
    Mat pos;     // (N+1) x D
    Mat cls;     // 1 x D
    std::vector<BlockParams> blocks;
    BatchNorm head_bn;
    Mat wh;      // D x C
    Mat bh;

    // Visits every tensor in declaration order. Running statistics are
    // reported with trainable = false.
    void visit(const std::function<void(const std::string& name, Mat& t, bool trainable)>& f);
    void visit(const std::function<void(const std::string& name, const Mat& t, bool trainable)>& f) const;
};

// Zero weights, unit BN scales and running variances.
VitParams zero_params(const VitConfig& cfg);

struct VitModel {
    VitConfig config;
    double input_scale = 1.0; // pixels are multiplied by this (1 / training max)
    VitParams params;
};

VitModel make_vit(const VitConfig& cfg);
// Weights uniform in +-1/sqrt(fan_in); biases and offsets zero; BN scales one.
void init_vit(VitModel& model);

// Row-major patch traversal, row-major flattening within a patch.
Mat patchify(const IonImage& image, const VitConfig& cfg, double input_scale);

Mat embed(const Mat& patches, const VitParams& p);
Mat self_attention(const Mat& z, const HeadParams& head, int head_dim);
Mat msa(const Mat& z, const BlockParams& block, const VitConfig& cfg);

enum class Mode { Train, Infer };

// Runs one block on a batch of token matrices. Train mode normalizes with the
// statistics of all tokens in the batch; Infer mode uses the running ones.
std::vector<Mat> transformer_block(const std::vector<Mat>& z, const BlockParams& block, const VitConfig& cfg,
                                   Mode mode);
Mat transformer_block(const Mat& z, const BlockParams& block, const VitConfig& cfg, Mode mode = Mode::Infer);

// Infer-mode head on the class-token output.
Row classify_head(const Mat& cls_out, const VitParams& p, double eps);

Row forward(const VitModel& model, const IonImage& image);
// Argmax (lowest index on ties) decoded as the state bitmask.
QubitState predict(const VitModel& model, const IonImage& image);

struct BatchResult {
    double loss = 0.0;
    std::size_t correct = 0;
    // Batch statistics of every BN site in forward order (blocks, then head).
    std::vector<std::pair<Mat, Mat>> bn_stats; // (mean, biased variance)
};

// Mean cross-entropy of the batch in the given BN mode; fills grad (same
// shapes as the model, running statistics untouched) when non-null.
BatchResult loss_and_gradient(const VitModel& model, std::span<const IonImage> batch, Mode mode, VitParams* grad);

struct TrainLog {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_train_accuracy;
};

// Training images whose batch statistics become the final running statistics.
inline constexpr std::size_t kBnRecalibrationImages = 8192;

// SGD over seeded per-epoch minibatch orders. Throws TrainingError on NaN.
VitModel train_vit(const VitConfig& cfg, std::span<const IonImage> train_images, TrainLog* log = nullptr);

inline constexpr std::uint16_t kVitVersion = 1;
std::vector<std::uint8_t> serialize_vit(const VitModel& model);
VitModel deserialize_vit(std::span<const std::uint8_t> bytes, const std::string& context = "vit model");
void save_vit(const VitModel& model, const std::filesystem::path& path);
VitModel load_vit(const std::filesystem::path& path);

namespace detail {
// Shared by the float and fixed file formats.
void write_config(io::ByteWriter& w, const VitConfig& cfg);
VitConfig read_config(io::ByteReader& r);
} // namespace detail

} // namespace qdetect::vit
