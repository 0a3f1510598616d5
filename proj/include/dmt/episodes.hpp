#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dmt/dhc.hpp"
#include "dmt/model.hpp"
#include "dmt/rng.hpp"

namespace dmt {

/// 1-way K-shot with Q queries per episode.
struct EpisodeSpec {
    int ways = 1;
    int shots = 1;
    int queries = 1;

    void validate() const {
        if (ways != 1) throw ConfigError("only 1-way episodes are supported");
        if (shots < 1 || queries < 1) throw ConfigError("K and Q must be >= 1");
    }
};

enum class ShapeFamily { kEllipse, kPolygon, kRing };

const char* family_name(ShapeFamily f);
ShapeFamily family_from_name(const std::string& name);

/// Per-channel affine style plus an additive low-frequency texture field;
/// the things that differ between domains without touching the masks.
struct StyleParams {
    std::array<float, 3> gain = {1.0f, 1.0f, 1.0f};
    std::array<float, 3> bias = {0.0f, 0.0f, 0.0f};
    float texture_amp = 0.06f;
};

struct SyntheticDomain {
    std::string id = "source";
    ShapeFamily family = ShapeFamily::kEllipse;
    StyleParams style;
    int n_classes = 6;
    float min_area = 0.08f;  // mask area as a fraction of the image
    float max_area = 0.42f;

    void validate() const;
};

struct Sample {
    Image image;
    Tensor mask;  // H x W binary
    int class_id = 0;
};

struct Dataset {
    std::string domain_id;
    std::vector<Sample> items;
    std::vector<std::vector<int>> by_class;

    void rebuild_index(int n_classes);
};

/// Deterministic dataset synthesis. Geometry (and therefore the masks)
/// depends only on (family, class, index, seed); the style layers on top.
Dataset gen_domain(const SyntheticDomain& spec, int n_images, int image_size, std::uint64_t seed);

/// On-disk layout: <dir>/img_00000.ppm, msk_00000.pgm, manifest.json.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

struct EpisodeIdx {
    int class_id = 0;
    std::vector<int> support;
    std::vector<int> query;
};

/// Samples a class with enough items, then K + Q distinct items from it.
EpisodeIdx sample_episode(const Dataset& ds, const EpisodeSpec& spec, Rng& rng);

/// Intersection over union of binary masks; both-empty counts as 1.
float iou(const Tensor& pred_binary, const Tensor& gt);

/// Forward state of one support/query pass, kept when gradients are needed.
struct EpisodeForward {
    std::vector<FeaturePyramid> support_pyrs;
    FeaturePyramid query_pyr;
    SmtResult smt;
    std::vector<DhcCache> dhc_caches;   // per shot
    std::vector<Tensor> corr_f;         // shot-averaged
    std::vector<Tensor> corr_b;
    FusionCache fusion_cache;
    HeadOutput heads;
    bool bypassed = false;
};

struct PipelineOptions {
    bool bypass_smt = false;  // replace both transforms with the identity
    bool combine_fb = false;  // fuse (M_f + 1 - M_b) / 2 before thresholding
};

/// Runs extractor -> SMT -> DHC -> fusion for one query against K shots.
EpisodeForward episode_forward(const Model& model, const std::vector<const Sample*>& support,
                               const Image& query_image, bool keep_cache,
                               const PipelineOptions& opts = {});

/// Backward from the two mask gradients down to fusion params and anchors.
void episode_backward(const Model& model, const EpisodeForward& fwd, const Tensor& d_m_f,
                      const Tensor& d_m_b, ModelGrads& grads);

/// Binary query prediction per the configured combine rule, thresholded at 0.5.
Tensor predict_binary(const HeadOutput& heads, const PipelineOptions& opts);

struct TsfConfig {
    int steps = 40;
    float lr = 1e-3f;           // desk-scale default; full-scale presets below
    std::string group = "encoder";

    void validate() const;
};

/// Full-scale per-dataset finetune rates, kept as named presets.
inline constexpr float kTsfLrIsic = 1e-6f;
inline constexpr float kTsfLrDeepglobe = 1e-6f;
inline constexpr float kTsfLrFss1000 = 1e-6f;
inline constexpr float kTsfLrChestXray = 1e-1f;

struct TsfOutcome {
    double loss_before = 0.0;
    double loss_after = 0.0;
    std::vector<double> loss_trace;  // loss at each step, ending in loss_after
};

/// Two-step test-time protocol: first self-tune only the configured group
/// by predicting the support masks (K = 1: the shot predicts itself;
/// K > 1: leave-one-out), then freeze everything. Only the tuned group's
/// tensors may change.
TsfOutcome tsf_finetune(Model& model, const std::vector<const Sample*>& shots,
                        const TsfConfig& cfg, const PipelineOptions& opts = {});

struct TrainConfig {
    int episodes = 500;
    float lr = 1e-3f;
    std::uint64_t seed = 0;
    EpisodeSpec episode;
};

struct TrainLogRow {
    long episode = 0;
    int class_id = 0;
    double l1 = 0.0, l2 = 0.0, total = 0.0;
};

struct TrainOutcome {
    std::vector<TrainLogRow> log;
    long episodes_done = 0;
    int skipped = 0;
};

/// Episodic meta-training: per episode the combined loss and one Adam
/// step over anchors + fusion params. Degenerate episodes (empty masks at
/// some level) are counted and skipped; a non-finite loss aborts.
TrainOutcome meta_train(Model& model, const Dataset& source, const TrainConfig& cfg,
                        AdamState& optim, long start_episode = 0);

struct MetaTestConfig {
    int runs = 5;
    int episodes = 100;
    std::uint64_t seed = 0;
    EpisodeSpec episode;
    TsfConfig tsf;
    bool tsf_enabled = true;
    PipelineOptions pipeline;
    int jobs = 1;
    std::string dump_dir;  // when set, predicted masks land here as PGM
};

struct EpisodeRow {
    int run = 0;
    long episode = 0;
    int class_id = 0;
    float iou_value = 0.0f;
    double l1 = 0.0, l2 = 0.0;
    double tsf_before = 0.0, tsf_after = 0.0;
};

struct MetaTestReport {
    std::vector<EpisodeRow> rows;
    std::vector<double> run_miou;          // with TSF as configured
    std::vector<double> run_miou_base;     // frozen model, no TSF
    double miou_mean = 0.0, miou_std = 0.0;
    double miou_base_mean = 0.0, miou_base_std = 0.0;
    int skipped = 0;
};

/// Multi-run meta-testing with per-episode TSF on a model clone plus a
/// no-TSF evaluation of the same episodes for the ablation columns.
MetaTestReport meta_test(const Model& model, const Dataset& target, const MetaTestConfig& cfg);

/// Mean Euclidean distance between per-level mean feature vectors of two
/// pyramid sets, optionally after per-image transforms.
double feature_distance(const std::vector<FeaturePyramid>& a, const std::vector<FeaturePyramid>& b,
                        const std::vector<std::vector<Tensor>>* w_a,
                        const std::vector<std::vector<Tensor>>* w_b, bool transformed);

/// Same, reported per level.
std::vector<double> feature_distance_per_level(const std::vector<FeaturePyramid>& a,
                                               const std::vector<FeaturePyramid>& b,
                                               const std::vector<std::vector<Tensor>>* w_a,
                                               const std::vector<std::vector<Tensor>>* w_b,
                                               bool transformed);

/// Support-role self-matching transforms of a lone image from its own mask
/// (no query blending); the per-image mapping used for the distribution
/// diagnostics.
std::vector<Tensor> self_transforms(const Model& model, const Sample& sample);

struct DistancePair {
    double pre = 0.0;
    double post = 0.0;
};

/// Domain-distance diagnostic: distance between two datasets' feature
/// distributions before and after the per-image transforms.
DistancePair domain_distance(const Model& model, const Dataset& a, const Dataset& b,
                             int max_images);

/// CSV / JSON writers with stable %.9g float formatting.
void write_train_log_csv(const std::filesystem::path& path, const std::vector<TrainLogRow>& rows,
                         bool append);
void write_report_csv(const std::filesystem::path& path, const std::vector<EpisodeRow>& rows);
void write_summary_json(const std::filesystem::path& path, const MetaTestReport& report,
                        const MetaTestConfig& cfg, const std::optional<DistancePair>& distance);

std::string format_g9(double v);

}  // namespace dmt
