#include "gf/evalbench.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"

namespace gf::evalbench {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Toy OCR.

std::vector<OcrBox> boxes_of(const std::vector<glyphgen::WordPlacement>& words) {
    std::vector<OcrBox> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back({w.x, w.y, w.w, w.h});
    return out;
}

std::vector<std::string> OcrResult::words() const {
    std::vector<std::string> out;
    for (const auto& r : reads)
        if (r.readable) out.push_back(r.word);
    return out;
}

std::vector<glyphgen::Variant> all_variants() {
    return {glyphgen::Variant::regular, glyphgen::Variant::bold, glyphgen::Variant::italic};
}

static double luma_at(const Image& img, int y, int x) {
    if (img.c == 1) return img.at(0, y, x);
    return 0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x);
}

OcrResult ocr_read(const Image& img, const std::vector<OcrBox>& boxes,
                   const std::vector<std::string>& vocab,
                   const std::vector<glyphgen::Variant>& fonts, double threshold) {
    if (img.c != 1 && img.c != 3)
        throw Error(ErrKind::validation, "ocr_read expects a 1- or 3-channel image");
    if (vocab.empty()) throw Error(ErrKind::validation, "ocr_read needs a nonempty vocabulary");
    if (fonts.empty()) throw Error(ErrKind::validation, "ocr_read needs at least one variant");
    for (const auto& w : vocab)
        if (!glyphgen::valid_word(w))
            throw Error(ErrKind::validation, "ocr vocabulary word '" + w + "' is not A-Z 0-9");

    OcrResult res;
    for (const auto& b : boxes) {
        if (b.w <= 0 || b.h <= 0 || b.x < 0 || b.y < 0 || b.x + b.w > img.w ||
            b.y + b.h > img.h)
            throw Error(ErrKind::validation, "ocr box outside the image");

        // Both polarities compete, so dark-on-light text scores like
        // light-on-dark. A polarity more than 80% ink is background flooding,
        // not text (no glyph fills over ~2/3 of its tight box), and is shut
        // out; that keeps all-black and all-white crops unreadable.
        int on = 0;
        for (int y = 0; y < b.h; ++y)
            for (int x = 0; x < b.w; ++x)
                if (luma_at(img, b.y + y, b.x + x) >= 0.5) ++on;
        const int area = b.w * b.h;
        bool admit[2];
        admit[0] = 5 * on <= 4 * area;
        admit[1] = 5 * (area - on) <= 4 * area;

        BoxRead best;
        for (const auto& word : vocab) {
            const int len = int(word.size());
            for (auto v : fonts) {
                for (int s = 1; 7 * s <= b.h + s; ++s) {
                    const auto ext = glyphgen::word_extent(len, v, s);
                    if (std::abs(ext.w - b.w) > s || std::abs(ext.h - b.h) > s) continue;
                    const Image ref = glyphgen::rasterize_word(word, v, s);
                    int64_t inter[2] = {0, 0}, uni[2] = {0, 0};
                    for (int y = 0; y < b.h; ++y)
                        for (int x = 0; x < b.w; ++x) {
                            const bool lit = luma_at(img, b.y + y, b.x + x) >= 0.5;
                            const bool rb =
                                y < ref.h && x < ref.w && ref.at(0, y, x) >= 0.5;
                            for (int p = 0; p < 2; ++p) {
                                const bool cb = lit != (p == 1);
                                inter[p] += (cb && rb) ? 1 : 0;
                                uni[p] += (cb || rb) ? 1 : 0;
                            }
                        }
                    for (int p = 0; p < 2; ++p) {
                        if (!admit[p] || uni[p] == 0) continue;
                        const double iou = double(inter[p]) / double(uni[p]);
                        if (iou > best.score) {
                            best.score = iou;
                            best.word = word;
                        }
                    }
                }
            }
        }
        best.readable = !best.word.empty() && best.score >= threshold;
        if (!best.readable) best.word.clear();
        res.reads.push_back(std::move(best));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Metrics.

OcrMetrics ocr_metrics(const std::vector<std::vector<std::string>>& detected,
                       const std::vector<std::vector<std::string>>& gold) {
    if (detected.size() != gold.size())
        throw Error(ErrKind::validation, "ocr_metrics: detected/gold length mismatch");
    OcrMetrics m;
    if (detected.empty()) return m;
    int64_t exact = 0, inter_sum = 0, det_sum = 0, gold_sum = 0;
    for (size_t i = 0; i < detected.size(); ++i) {
        auto d = detected[i];
        auto g = gold[i];
        std::sort(d.begin(), d.end());
        std::sort(g.begin(), g.end());
        if (d == g) ++exact;
        std::vector<std::string> inter;
        std::set_intersection(d.begin(), d.end(), g.begin(), g.end(), std::back_inserter(inter));
        inter_sum += int64_t(inter.size());
        det_sum += int64_t(d.size());
        gold_sum += int64_t(g.size());
    }
    m.accuracy = double(exact) / double(detected.size());
    m.precision = det_sum > 0 ? double(inter_sum) / double(det_sum) : 0.0;
    m.recall = gold_sum > 0 ? double(inter_sum) / double(gold_sum) : 0.0;
    m.f1 = (m.precision + m.recall) > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall)
                                        : 0.0;
    return m;
}

// ---------------------------------------------------------------------------
// Toy feature network.

std::vector<LabeledCrop> make_crop_dataset(const std::vector<std::string>& vocab, int crop,
                                           int count, uint64_t seed) {
    if (vocab.empty()) throw Error(ErrKind::validation, "crop dataset needs a vocabulary");
    if (crop < glyphgen::kGlyphH)
        throw Error(ErrKind::validation, "crop size too small for any glyph");
    for (const auto& w : vocab) {
        if (!glyphgen::valid_word(w))
            throw Error(ErrKind::validation, "vocabulary word '" + w + "' is not A-Z 0-9");
        const auto e = glyphgen::word_extent(int(w.size()), glyphgen::Variant::regular, 1);
        if (e.w > crop || e.h > crop)
            throw Error(ErrKind::validation, "vocabulary word '" + w + "' cannot fit the crop");
    }
    Rng rng(mix64(seed, fnv1a64("crop-dataset")));
    std::vector<LabeledCrop> out;
    out.reserve(size_t(count));
    const auto variants = all_variants();
    for (int i = 0; i < count; ++i) {
        const int label = rng.uniform_int(int(vocab.size()));
        const auto& word = vocab[size_t(label)];
        int vi = rng.uniform_int(3);
        glyphgen::Extent ext;
        std::vector<int> scales;
        for (int tries = 0; tries < 3 && scales.empty(); ++tries) {
            const auto v = variants[size_t((vi + tries) % 3)];
            for (int s = 1;; ++s) {
                const auto e = glyphgen::word_extent(int(word.size()), v, s);
                if (e.w > crop || e.h > crop) break;
                scales.push_back(s);
            }
            if (!scales.empty()) vi = (vi + tries) % 3;
        }
        const auto v = variants[size_t(vi)];
        const int s = scales[size_t(rng.uniform_int(int(scales.size())))];
        ext = glyphgen::word_extent(int(word.size()), v, s);
        const int x = rng.uniform_int(crop - ext.w + 1);
        const int y = rng.uniform_int(crop - ext.h + 1);
        LabeledCrop c;
        c.image = Image(1, crop, crop, 0.0);
        glyphgen::render_word(c.image, word, x, y, v, s);
        c.label = label;
        out.push_back(std::move(c));
    }
    return out;
}

ToyFeatureNet::ToyFeatureNet(int width_, int classes_, uint64_t seed)
    : width(width_), classes(classes_) {
    if (width <= 0 || classes <= 0)
        throw Error(ErrKind::config, "feature net needs positive width and class count");
    Rng rng(mix64(seed, fnv1a64("feature-net")));
    c1 = nn::Conv2d(1, width, 3, 1, 1, rng);
    c2 = nn::Conv2d(width, width, 3, 2, 1, rng);
    c3 = nn::Conv2d(width, width, 3, 2, 1, rng);
    head = nn::Linear(width, classes, rng);
}

nn::ParamList ToyFeatureNet::params() {
    nn::ParamList out;
    c1.collect("c1", out);
    c2.collect("c2", out);
    c3.collect("c3", out);
    head.collect("head", out);
    return out;
}

ToyFeatureNet::Out ToyFeatureNet::forward(const nn::Var& x) const {
    auto h1 = nn::silu(c1.forward(x));
    auto h2 = nn::silu(c2.forward(h1));
    auto h3 = nn::silu(c3.forward(h2));
    auto feats = nn::global_avg_pool(h3);
    return {feats, head.forward(feats)};
}

static Image to_luma(const Image& img) {
    if (img.c == 1) return img;
    if (img.c != 3)
        throw Error(ErrKind::validation, "feature input must have 1 or 3 channels");
    Image out(1, img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) out.at(0, y, x) = luma_at(img, y, x);
    return out;
}

static nn::Tensor batch_of(const std::vector<const Image*>& imgs) {
    const int h = imgs[0]->h, w = imgs[0]->w;
    nn::Tensor t({int(imgs.size()), 1, h, w});
    for (size_t i = 0; i < imgs.size(); ++i) {
        if (imgs[i]->c != 1 || imgs[i]->h != h || imgs[i]->w != w)
            throw Error(ErrKind::validation, "feature batch needs uniform grayscale crops");
        std::copy(imgs[i]->px.begin(), imgs[i]->px.end(), t.v.begin() + int64_t(i) * h * w);
    }
    return t;
}

std::vector<double> ToyFeatureNet::features(const Image& img) const {
    nn::NoGradGuard ng;
    const Image g = to_luma(img);
    auto out = forward(nn::make_const(batch_of({&g})));
    return out.features->val.v;
}

int ToyFeatureNet::classify(const Image& img) const {
    nn::NoGradGuard ng;
    const Image g = to_luma(img);
    auto out = forward(nn::make_const(batch_of({&g})));
    const auto& lv = out.logits->val.v;
    return int(std::max_element(lv.begin(), lv.end()) - lv.begin());
}

static double accuracy_on(const ToyFeatureNet& net, const std::vector<LabeledCrop>& data,
                          const std::vector<int>& idx) {
    if (idx.empty()) return 0.0;
    int hit = 0;
    for (int i : idx)
        if (net.classify(data[size_t(i)].image) == data[size_t(i)].label) ++hit;
    return double(hit) / double(idx.size());
}

FeatureNetResult train_toy_feature_net(const std::vector<LabeledCrop>& data, int classes,
                                       const FeatureNetConfig& cfg) {
    if (data.empty()) throw Error(ErrKind::validation, "feature net needs a nonempty dataset");
    if (cfg.holdout_frac < 0 || cfg.holdout_frac >= 1)
        throw Error(ErrKind::config, "holdout fraction must be in [0,1)");
    for (const auto& c : data) {
        if (c.label < 0 || c.label >= classes)
            throw Error(ErrKind::validation, "crop label outside the class range");
        if (c.image.c != 1 || c.image.h != data[0].image.h || c.image.w != data[0].image.w)
            throw Error(ErrKind::validation, "crops must be uniform grayscale images");
    }

    std::vector<int> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    Rng rsplit(mix64(cfg.seed, fnv1a64("feature-split")));
    for (int i = int(order.size()) - 1; i > 0; --i)
        std::swap(order[size_t(i)], order[size_t(rsplit.uniform_int(i + 1))]);
    int hold = std::min(int(std::llround(cfg.holdout_frac * double(data.size()))),
                        int(data.size()) - 1);
    if (hold < 0) hold = 0;
    std::vector<int> train_idx(order.begin(), order.end() - hold);
    std::vector<int> hold_idx(order.end() - hold, order.end());

    FeatureNetResult res;
    res.net = ToyFeatureNet(cfg.width, classes, cfg.seed);
    auto params = res.net.params();
    nn::AdamW opt;
    opt.lr = cfg.lr;
    Rng rtrain(mix64(cfg.seed, fnv1a64("feature-train")));
    const int bsz = std::min(cfg.batch, int(train_idx.size()));
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<const Image*> imgs;
        std::vector<int> labels;
        for (int k = 0; k < bsz; ++k) {
            const int i = train_idx[size_t(rtrain.uniform_int(int(train_idx.size())))];
            imgs.push_back(&data[size_t(i)].image);
            labels.push_back(data[size_t(i)].label);
        }
        auto x = nn::make_const(batch_of(imgs));
        auto out = res.net.forward(x);
        auto loss = nn::cross_entropy_logits(out.logits, labels);
        opt.zero_grad(params);
        nn::backward(loss);
        opt.step(params);
    }
    res.train_accuracy = accuracy_on(res.net, data, train_idx);
    res.holdout_accuracy = accuracy_on(res.net, data, hold_idx);
    res.holdout_count = hold;
    return res;
}

// ---------------------------------------------------------------------------
// Fréchet distance.

Moments feature_moments(const std::vector<std::vector<double>>& feats, double shrinkage) {
    if (feats.empty()) throw Error(ErrKind::validation, "empty feature set");
    const size_t d = feats[0].size();
    if (d == 0) throw Error(ErrKind::validation, "zero-dimensional features");
    for (const auto& f : feats)
        if (f.size() != d) throw Error(ErrKind::validation, "ragged feature vectors");
    const size_t n = feats.size();
    if (n <= d && shrinkage <= 0)
        throw Error(ErrKind::validation,
                    "covariance needs more samples than dimensions; pass shrinkage");
    Moments m;
    m.mu.assign(d, 0.0);
    for (const auto& f : feats)
        for (size_t j = 0; j < d; ++j) m.mu[j] += f[j];
    for (size_t j = 0; j < d; ++j) m.mu[j] /= double(n);
    m.cov.assign(d, std::vector<double>(d, 0.0));
    if (n > 1) {
        for (const auto& f : feats)
            for (size_t j = 0; j < d; ++j)
                for (size_t k = 0; k < d; ++k)
                    m.cov[j][k] += (f[j] - m.mu[j]) * (f[k] - m.mu[k]);
        for (size_t j = 0; j < d; ++j)
            for (size_t k = 0; k < d; ++k) m.cov[j][k] /= double(n - 1);
    }
    for (size_t j = 0; j < d; ++j) m.cov[j][j] += shrinkage;
    return m;
}

static Eigen::MatrixXd to_eigen(const std::vector<std::vector<double>>& m) {
    const Eigen::Index d = Eigen::Index(m.size());
    Eigen::MatrixXd out(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
        if (Eigen::Index(m[size_t(i)].size()) != d)
            throw Error(ErrKind::validation, "covariance matrix must be square");
        for (Eigen::Index j = 0; j < d; ++j) out(i, j) = m[size_t(i)][size_t(j)];
    }
    return out;
}

// Symmetric PSD square root; eigenvalues slightly negative from rounding are
// clipped to zero, materially negative ones reject the input.
static Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues();
    const double tol = 1e-8 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev(i) < -tol)
            throw Error(ErrKind::validation, "covariance square root hit a negative eigenvalue");
        ev(i) = std::sqrt(std::max(ev(i), 0.0));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double frechet_from_moments(const Moments& a, const Moments& b) {
    if (a.mu.size() != b.mu.size())
        throw Error(ErrKind::validation, "feature dimensions differ");
    const Eigen::MatrixXd sa = to_eigen(a.cov);
    const Eigen::MatrixXd sb = to_eigen(b.cov);
    if (sa.rows() != Eigen::Index(a.mu.size()) || sb.rows() != Eigen::Index(b.mu.size()))
        throw Error(ErrKind::validation, "moment dimensions differ");
    double mu2 = 0;
    for (size_t j = 0; j < a.mu.size(); ++j) {
        const double dj = a.mu[j] - b.mu[j];
        mu2 += dj * dj;
    }
    const Eigen::MatrixXd root_a = sqrt_psd(sa);
    // Tr((Sa Sb)^{1/2}) via the symmetric similar form Sa^{1/2} Sb Sa^{1/2}.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(root_a * sb * root_a.transpose());
    Eigen::VectorXd ev = es.eigenvalues();
    const double tol = 1e-8 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    double tr_sqrt = 0;
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev(i) < -tol)
            throw Error(ErrKind::validation, "covariance square root hit a negative eigenvalue");
        tr_sqrt += std::sqrt(std::max(ev(i), 0.0));
    }
    const double d = mu2 + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    return d > 0 ? d : 0.0;
}

double frechet_distance(const std::vector<std::vector<double>>& a,
                        const std::vector<std::vector<double>>& b, double shrinkage) {
    return frechet_from_moments(feature_moments(a, shrinkage), feature_moments(b, shrinkage));
}

// ---------------------------------------------------------------------------
// Benchmark.

const char* quoting_name(Quoting q) {
    switch (q) {
        case Quoting::single: return "single";
        case Quoting::double_q: return "double";
        case Quoting::none: return "none";
    }
    throw Error(ErrKind::internal, "bad quoting style");
}

Quoting quoting_from_name(const std::string& name) {
    if (name == "single") return Quoting::single;
    if (name == "double") return Quoting::double_q;
    if (name == "none") return Quoting::none;
    throw Error(ErrKind::validation, "unknown quoting style '" + name + "'");
}

std::vector<std::string> default_templates() {
    return {
        "a vintage movie poster for {}",
        "a neon sign that reads {}",
        "a book cover titled {}",
        "wall art with the words {}",
        "a storefront banner announcing {}",
    };
}

static void validate_template(const std::string& t) {
    const auto slot = t.find("{}");
    if (slot == std::string::npos || t.find("{}", slot + 1) != std::string::npos)
        throw Error(ErrKind::validation, "template must contain exactly one {} slot: " + t);
    if (t.find_first_of("'\"`") != std::string::npos)
        throw Error(ErrKind::validation, "template must not contain quote characters: " + t);
}

std::vector<BenchmarkCase> build_benchmark(int num_cases, uint64_t seed,
                                           const std::vector<std::string>& templates,
                                           const std::vector<std::string>& vocab) {
    if (num_cases < 0) throw Error(ErrKind::validation, "negative benchmark size");
    if (templates.empty()) throw Error(ErrKind::validation, "at least one template required");
    for (const auto& t : templates) validate_template(t);
    if (vocab.empty()) throw Error(ErrKind::validation, "benchmark needs a vocabulary");
    for (const auto& w : vocab)
        if (!glyphgen::valid_word(w))
            throw Error(ErrKind::validation, "vocabulary word '" + w + "' is not A-Z 0-9");

    Rng rng(mix64(seed, fnv1a64("benchmark")));
    std::vector<BenchmarkCase> out;
    out.reserve(size_t(num_cases));
    std::vector<int> order(vocab.size());
    for (int i = 0; i < num_cases; ++i) {
        BenchmarkCase c;
        c.style = static_cast<Quoting>(i % 3);
        const int k = 1 + rng.uniform_int(std::min(3, int(vocab.size())));
        for (size_t j = 0; j < order.size(); ++j) order[j] = int(j);
        for (int j = 0; j < k; ++j) {
            const int pick = j + rng.uniform_int(int(order.size()) - j);
            std::swap(order[size_t(j)], order[size_t(pick)]);
            c.gold.push_back(vocab[size_t(order[size_t(j)])]);
        }
        std::string title;
        for (int j = 0; j < k; ++j) {
            if (j) title += ' ';
            title += c.gold[size_t(j)];
        }
        std::string quoted = title;
        if (c.style == Quoting::single) quoted = "'" + title + "'";
        if (c.style == Quoting::double_q) quoted = "\"" + title + "\"";
        const auto& tpl = templates[size_t(rng.uniform_int(int(templates.size())))];
        c.prompt = tpl;
        c.prompt.replace(c.prompt.find("{}"), 2, quoted);
        out.push_back(std::move(c));
    }
    return out;
}

void write_benchmark(const std::filesystem::path& path, const std::vector<BenchmarkCase>& cases) {
    std::string out;
    for (const auto& c : cases) {
        json j;
        j["prompt"] = c.prompt;
        j["gold"] = c.gold;
        j["style"] = quoting_name(c.style);
        out += j.dump();
        out += '\n';
    }
    write_file_atomic(path, out);
}

std::vector<BenchmarkCase> read_benchmark(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    std::vector<BenchmarkCase> out;
    std::istringstream is(text);
    std::string line;
    int ln = 0;
    while (std::getline(is, line)) {
        ++ln;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw Error(ErrKind::io, path.string() + ":" + std::to_string(ln) + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("prompt") || !j.contains("gold") ||
            !j.contains("style") || !j["prompt"].is_string() || !j["gold"].is_array())
            throw Error(ErrKind::validation,
                        path.string() + ":" + std::to_string(ln) + ": bad benchmark record");
        BenchmarkCase c;
        c.prompt = j["prompt"].get<std::string>();
        for (const auto& g : j["gold"]) {
            if (!g.is_string())
                throw Error(ErrKind::validation,
                            path.string() + ":" + std::to_string(ln) + ": bad gold word");
            c.gold.push_back(g.get<std::string>());
        }
        c.style = quoting_from_name(j["style"].get<std::string>());
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------------------
// End-to-end evaluation.

static std::string eval_config_hash(const EvalConfig& cfg,
                                    const std::vector<BenchmarkCase>& benchmark) {
    json b = json::array();
    for (const auto& c : benchmark)
        b.push_back({{"prompt", c.prompt}, {"gold", c.gold}, {"style", quoting_name(c.style)}});
    json j;
    j["canvas"] = cfg.canvas;
    j["images_per_prompt"] = cfg.images_per_prompt;
    j["omega"] = cfg.omega;
    j["seed"] = cfg.seed;
    j["ocr_threshold"] = cfg.ocr_threshold;
    j["max_scale"] = cfg.max_scale;
    j["vocab"] = cfg.vocab;
    j["shrinkage"] = cfg.shrinkage;
    j["benchmark"] = hex64(fnv1a64(b.dump()));
    return hex64(fnv1a64(j.dump()));
}

MetricsReport run_eval(const Generator& generate, const std::vector<BenchmarkCase>& benchmark,
                       const EvalConfig& cfg, const Extractor& extractor,
                       const FeatureFn& features, const std::vector<Image>* reference) {
    if (!generate) throw Error(ErrKind::validation, "run_eval needs a generator");
    if (cfg.canvas <= 0 || cfg.images_per_prompt <= 0)
        throw Error(ErrKind::config, "run_eval needs a positive canvas and image count");
    if (cfg.vocab.empty()) throw Error(ErrKind::config, "run_eval needs an OCR vocabulary");

    const Extractor ex = extractor ? extractor : Extractor([&cfg](const std::string& prompt) {
        return promptintel::rules_analyze(prompt, cfg.canvas, cfg.max_scale);
    });

    MetricsReport rep;
    rep.omega = cfg.omega;
    rep.seed = cfg.seed;
    rep.config_hash = eval_config_hash(cfg, benchmark);

    std::vector<std::vector<std::string>> det_all, gold_all, extracted_all, gold_cases;
    std::vector<std::vector<double>> gen_feats;
    for (size_t ci = 0; ci < benchmark.size(); ++ci) {
        const auto& bc = benchmark[ci];
        CaseRecord rec;
        rec.index = int(ci);
        rec.prompt = bc.prompt;
        rec.gold = bc.gold;
        const auto analysis = ex(bc.prompt);
        rec.extracted = analysis.keywords;
        rec.source = analysis.source;
        const auto placements = promptintel::to_placements(analysis, cfg.canvas);
        const auto boxes = boxes_of(placements);
        for (int j = 0; j < cfg.images_per_prompt; ++j) {
            const uint64_t s = mix64(cfg.seed, fnv1a64("eval-case-" + std::to_string(ci) +
                                                       "-img-" + std::to_string(j)));
            try {
                const Image img = generate({bc.prompt, placements, cfg.omega, s});
                const auto ocr = ocr_read(img, boxes, cfg.vocab, all_variants(),
                                          cfg.ocr_threshold);
                rec.detected.push_back(ocr.words());
                det_all.push_back(rec.detected.back());
                gold_all.push_back(bc.gold);
                if (features) gen_feats.push_back(features(img));
                ++rep.generated;
            } catch (const std::exception& e) {
                ++rec.failures;
                ++rep.failed;
                if (rec.error.empty()) rec.error = e.what();
            }
        }
        extracted_all.push_back(rec.extracted);
        gold_cases.push_back(bc.gold);
        rep.cases.push_back(std::move(rec));
    }

    rep.ocr = ocr_metrics(det_all, gold_all);
    rep.keyword_id = promptintel::keyword_id_metrics(extracted_all, gold_cases);
    if (features && reference && !reference->empty() && !gen_feats.empty()) {
        std::vector<std::vector<double>> ref_feats;
        ref_feats.reserve(reference->size());
        for (const auto& img : *reference) ref_feats.push_back(features(img));
        rep.frechet = frechet_distance(gen_feats, ref_feats, cfg.shrinkage);
        rep.frechet_valid = true;
    }
    return rep;
}

static std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void write_report(const std::filesystem::path& dir, const MetricsReport& rep) {
    std::filesystem::create_directories(dir);
    std::string txt;
    txt += "config_hash " + rep.config_hash + "\n";
    txt += "omega " + fmt(rep.omega) + "\n";
    txt += "seed " + std::to_string(rep.seed) + "\n";
    txt += "cases " + std::to_string(rep.cases.size()) + "\n";
    txt += "generated " + std::to_string(rep.generated) + "\n";
    txt += "failed " + std::to_string(rep.failed) + "\n";
    txt += "ocr_accuracy " + fmt(rep.ocr.accuracy) + "\n";
    txt += "ocr_precision " + fmt(rep.ocr.precision) + "\n";
    txt += "ocr_recall " + fmt(rep.ocr.recall) + "\n";
    txt += "ocr_f1 " + fmt(rep.ocr.f1) + "\n";
    txt += "keyword_accuracy " + fmt(rep.keyword_id.accuracy) + "\n";
    txt += "keyword_precision " + fmt(rep.keyword_id.precision) + "\n";
    txt += "keyword_recall " + fmt(rep.keyword_id.recall) + "\n";
    txt += "keyword_f1 " + fmt(rep.keyword_id.f1) + "\n";
    txt += std::string("frechet ") + (rep.frechet_valid ? fmt(rep.frechet) : "n/a") + "\n";
    write_file_atomic(dir / "report.txt", txt);

    std::string jl;
    for (const auto& c : rep.cases) {
        json j;
        j["index"] = c.index;
        j["prompt"] = c.prompt;
        j["gold"] = c.gold;
        j["extracted"] = c.extracted;
        j["source"] = promptintel::source_name(c.source);
        j["detected"] = c.detected;
        j["failures"] = c.failures;
        j["error"] = c.error;
        jl += j.dump();
        jl += '\n';
    }
    write_file_atomic(dir / "cases.jsonl", jl);
}

void write_curve_table(const std::filesystem::path& path,
                       const std::vector<MetricsReport>& sweeps) {
    std::string out =
        "omega\tocr_accuracy\tocr_precision\tocr_recall\tocr_f1\t"
        "keyword_accuracy\tkeyword_f1\tfrechet\tgenerated\tfailed\n";
    for (const auto& r : sweeps) {
        out += fmt(r.omega) + "\t" + fmt(r.ocr.accuracy) + "\t" + fmt(r.ocr.precision) + "\t" +
               fmt(r.ocr.recall) + "\t" + fmt(r.ocr.f1) + "\t" + fmt(r.keyword_id.accuracy) +
               "\t" + fmt(r.keyword_id.f1) + "\t" +
               (r.frechet_valid ? fmt(r.frechet) : std::string("nan")) + "\t" +
               std::to_string(r.generated) + "\t" + std::to_string(r.failed) + "\n";
    }
    write_file_atomic(path, out);
}

}  // namespace gf::evalbench
