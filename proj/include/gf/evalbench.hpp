#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gf/glyphgen.hpp"
#include "gf/nn.hpp"
#include "gf/promptintel.hpp"

namespace gf::evalbench {

// Evaluation harness: a template-matching toy OCR, image-level OCR metrics,
// Fréchet distance over pluggable feature vectors, a generated prompt
// benchmark, and the end-to-end eval loop that ties them together.

// ---------------------------------------------------------------------------
// Toy OCR. Each box crop is binarized at 0.5 (luminance for RGB) and scored
// in both polarities, so dark text on a light ground reads the same as
// light-on-dark; a polarity that is over 80% ink counts as background
// flooding and is ignored, which keeps all-black and all-white crops
// unreadable. Candidates are every (vocab word, variant, scale) whose
// closed-form extent fits the box within one scaled pixel per axis; the best
// pixel-IoU against a tight reference rendering anchored at the box origin
// wins if it clears the threshold.

struct OcrBox {
    int x = 0, y = 0, w = 0, h = 0;  // pixels, top-left origin
};

std::vector<OcrBox> boxes_of(const std::vector<glyphgen::WordPlacement>& words);

struct BoxRead {
    std::string word;   // empty when unreadable
    double score = 0;   // best IoU over candidates, kept even below threshold
    bool readable = false;
};

struct OcrResult {
    std::vector<BoxRead> reads;
    std::vector<std::string> words() const;  // readable words, box order
};

std::vector<glyphgen::Variant> all_variants();

OcrResult ocr_read(const Image& img, const std::vector<OcrBox>& boxes,
                   const std::vector<std::string>& vocab,
                   const std::vector<glyphgen::Variant>& fonts = all_variants(),
                   double threshold = 0.6);

// ---------------------------------------------------------------------------
// Image-level OCR metrics over paired per-image word multisets: accuracy is
// the exact multiset match rate, precision/recall/F are micro-averaged.
// Empty denominators report 0. Throws on length mismatch.

struct OcrMetrics {
    double accuracy = 0, precision = 0, recall = 0, f1 = 0;
};

OcrMetrics ocr_metrics(const std::vector<std::vector<std::string>>& detected,
                       const std::vector<std::vector<std::string>>& gold);

// ---------------------------------------------------------------------------
// Toy feature network: a small fully-convolutional classifier over the vocab,
// trained on labeled single-word crops. The global-average-pooled activations
// (dim = width) double as the Fréchet feature map; RGB inputs are collapsed
// to luminance first, so the net reads scenes and glyph renders alike.

struct LabeledCrop {
    Image image;  // grayscale, ink on black
    int label = 0;
};

// Uniform over words / variants / feasible scales / positions on a crop-sized
// canvas. Deterministic in seed.
std::vector<LabeledCrop> make_crop_dataset(const std::vector<std::string>& vocab, int crop,
                                           int count, uint64_t seed);

struct ToyFeatureNet {
    nn::Conv2d c1, c2, c3;
    nn::Linear head;
    int width = 16, classes = 0;

    ToyFeatureNet() = default;
    ToyFeatureNet(int width_, int classes_, uint64_t seed);

    nn::ParamList params();
    // x is (B,1,H,W); returns features (B,width) and logits (B,classes).
    struct Out {
        nn::Var features, logits;
    };
    Out forward(const nn::Var& x) const;

    std::vector<double> features(const Image& img) const;
    int classify(const Image& img) const;
};

struct FeatureNetConfig {
    int width = 16;
    int steps = 1500;
    int batch = 16;
    double lr = 1e-3;
    double holdout_frac = 0.2;  // 0 trains on everything
    uint64_t seed = 0;
};

struct FeatureNetResult {
    ToyFeatureNet net;
    double train_accuracy = 0;    // on the training split after the run
    double holdout_accuracy = 0;  // 0 when holdout_frac leaves no samples
    int holdout_count = 0;
};

FeatureNetResult train_toy_feature_net(const std::vector<LabeledCrop>& data, int classes,
                                       const FeatureNetConfig& cfg);

// ---------------------------------------------------------------------------
// Fréchet distance ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}) between
// Gaussians fitted to two feature sets. Covariances use the unbiased 1/(n-1)
// estimator plus optional shrinkage * I; without shrinkage each set needs
// more samples than dimensions. Matrix square roots go through symmetric
// eigendecompositions; tiny negative eigenvalues from rounding are clipped,
// anything materially negative throws.

struct Moments {
    std::vector<double> mu;
    std::vector<std::vector<double>> cov;  // square, symmetric
};

Moments feature_moments(const std::vector<std::vector<double>>& feats, double shrinkage = 0.0);
double frechet_from_moments(const Moments& a, const Moments& b);
double frechet_distance(const std::vector<std::vector<double>>& a,
                        const std::vector<std::vector<double>>& b, double shrinkage = 0.0);

// ---------------------------------------------------------------------------
// Prompt benchmark. Each case embeds a short title of vocab words into a
// template; styles rotate round-robin so every third case is single-quoted,
// double-quoted, unquoted. Gold keywords always appear verbatim in the
// prompt. Templates hold exactly one "{}" slot and no quote characters.

enum class Quoting { single, double_q, none };
const char* quoting_name(Quoting q);
Quoting quoting_from_name(const std::string& name);

struct BenchmarkCase {
    std::string prompt;
    std::vector<std::string> gold;  // title words, prompt order
    Quoting style = Quoting::none;
};

std::vector<std::string> default_templates();

std::vector<BenchmarkCase> build_benchmark(int num_cases, uint64_t seed,
                                           const std::vector<std::string>& templates,
                                           const std::vector<std::string>& vocab);

// One JSON object per line: {"prompt":..., "gold":[...], "style":...}.
void write_benchmark(const std::filesystem::path& path, const std::vector<BenchmarkCase>& cases);
std::vector<BenchmarkCase> read_benchmark(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// End-to-end evaluation: per case, analyze the prompt, generate
// images_per_prompt images with per-image derived seeds, OCR them inside the
// proposed boxes, and aggregate. Generation failures are recorded per case
// and excluded from the averages. Fréchet runs when both a feature function
// and a reference set are supplied.

struct GenRequest {
    std::string prompt;
    std::vector<glyphgen::WordPlacement> words;  // proposed layout, pixels
    double omega = 7.5;
    uint64_t seed = 0;
};

using Generator = std::function<Image(const GenRequest&)>;
using Extractor = std::function<promptintel::PromptAnalysis(const std::string&)>;
using FeatureFn = std::function<std::vector<double>(const Image&)>;

struct EvalConfig {
    int canvas = 64;
    int images_per_prompt = 4;
    double omega = 7.5;
    uint64_t seed = 0;
    double ocr_threshold = 0.6;
    int max_scale = 3;  // layout proposal bound for the default extractor
    std::vector<std::string> vocab;
    double shrinkage = 0.0;
};

struct CaseRecord {
    int index = 0;
    std::string prompt;
    std::vector<std::string> gold;
    std::vector<std::string> extracted;
    promptintel::Source source = promptintel::Source::rules;
    std::vector<std::vector<std::string>> detected;  // one list per generated image
    int failures = 0;
    std::string error;  // first failure message, empty otherwise
};

struct MetricsReport {
    OcrMetrics ocr;                      // over all generated images
    promptintel::IdMetrics keyword_id;   // extracted vs gold, per case
    double frechet = 0;
    bool frechet_valid = false;
    int generated = 0, failed = 0;
    double omega = 0;
    uint64_t seed = 0;
    std::string config_hash;  // eval parameters + benchmark content
    std::vector<CaseRecord> cases;
};

// extractor defaults to the rule-based analyzer at cfg.canvas / cfg.max_scale.
MetricsReport run_eval(const Generator& generate, const std::vector<BenchmarkCase>& benchmark,
                       const EvalConfig& cfg, const Extractor& extractor = {},
                       const FeatureFn& features = {},
                       const std::vector<Image>* reference = nullptr);

// report.txt (metric lines) plus cases.jsonl (one record per case) under dir.
void write_report(const std::filesystem::path& dir, const MetricsReport& report);

// Tab-separated table, one row per report: omega, OCR metrics, keyword
// metrics, Fréchet, counts. Plot-tool friendly.
void write_curve_table(const std::filesystem::path& path,
                       const std::vector<MetricsReport>& sweeps);

}  // namespace gf::evalbench
