// Command-line harness: synthetic data generation, episodic meta-training,
// meta-testing with test-time self-finetuning, and transform diagnostics.
//
// Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric abort.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dmt/checkpoint.hpp"
#include "dmt/episodes.hpp"

using namespace dmt;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

std::optional<std::uint64_t> env_seed() {
    const char* s = std::getenv("DMT_SEED");
    if (s == nullptr || *s == '\0') return std::nullopt;
    return std::strtoull(s, nullptr, 10);
}

json load_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ConfigError("bad JSON in " + path + ": " + e.what());
    }
    return j;
}

StyleParams style_from_json(const json& j) {
    StyleParams s;
    if (j.contains("gain")) {
        auto g = j.at("gain").get<std::vector<float>>();
        if (g.size() != 3) throw ConfigError("style.gain needs 3 entries");
        std::copy(g.begin(), g.end(), s.gain.begin());
    }
    if (j.contains("bias")) {
        auto b = j.at("bias").get<std::vector<float>>();
        if (b.size() != 3) throw ConfigError("style.bias needs 3 entries");
        std::copy(b.begin(), b.end(), s.bias.begin());
    }
    s.texture_amp = j.value("texture_amp", s.texture_amp);
    return s;
}

SyntheticDomain domain_from_json(const json& j) {
    SyntheticDomain d;
    d.id = j.value("id", d.id);
    d.family = family_from_name(j.value("family", std::string("ellipse")));
    d.n_classes = j.value("n_classes", d.n_classes);
    d.min_area = j.value("min_area", d.min_area);
    d.max_area = j.value("max_area", d.max_area);
    if (j.contains("style")) d.style = style_from_json(j.at("style"));
    d.validate();
    return d;
}

// Source plus two style-shifted targets with disjoint shape families.
json default_gen_spec() {
    return json{
        {"image_size", 64},
        {"images_per_domain", 180},
        {"domains",
         json::array(
             {json{{"id", "source"}, {"family", "ellipse"}},
              json{{"id", "target_polygon"},
                   {"family", "polygon"},
                   {"style",
                    json{{"gain", {1.6, 0.7, 1.15}}, {"bias", {0.12, -0.06, 0.03}}, {"texture_amp", 0.18}}}},
              json{{"id", "target_ring"},
                   {"family", "ring"},
                   {"style",
                    json{{"gain", {0.55, 1.3, 0.9}}, {"bias", {-0.04, 0.14, 0.08}}, {"texture_amp", 0.25}}}}})}};
}

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir, std::uint64_t seed) {
    json spec = spec_path.empty() ? default_gen_spec() : load_json(spec_path);
    int image_size = spec.value("image_size", 64);
    int n_images = spec.value("images_per_domain", 180);
    if (!spec.contains("domains") || !spec.at("domains").is_array() || spec.at("domains").empty()) {
        throw ConfigError("gen-data spec needs a non-empty domains array");
    }
    for (const json& dj : spec.at("domains")) {
        SyntheticDomain d = domain_from_json(dj);
        Dataset ds = gen_domain(d, n_images, image_size, seed);
        save_dataset(std::filesystem::path(out_dir) / d.id, ds);
        std::cout << "wrote " << ds.items.size() << " images to " << out_dir << "/" << d.id << "\n";
    }
    return 0;
}

ModelConfig model_config_from_json(const json& j, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.seed = seed;
    if (j.contains("pyramid")) {
        const json& p = j.at("pyramid");
        cfg.pyramid.levels = p.value("levels", cfg.pyramid.levels);
        if (p.contains("channels")) cfg.pyramid.channels = p.at("channels").get<std::vector<int>>();
        if (p.contains("strides")) cfg.pyramid.strides = p.at("strides").get<std::vector<int>>();
    }
    if (j.contains("smt")) {
        const json& s = j.at("smt");
        cfg.smt.gamma = s.value("gamma", cfg.smt.gamma);
        cfg.smt.beta = s.value("beta", cfg.smt.beta);
        cfg.smt.ridge = s.value("ridge", cfg.smt.ridge);
    }
    if (j.contains("weights")) {
        const json& w = j.at("weights");
        cfg.weights.alpha1 = w.value("alpha1", cfg.weights.alpha1);
        cfg.weights.alpha2 = w.value("alpha2", cfg.weights.alpha2);
    }
    cfg.pyramid.validate();
    cfg.smt.validate();
    cfg.weights.validate();
    return cfg;
}

int cmd_meta_train(const std::string& config_path, const std::string& out_dir, bool resume) {
    json j = load_json(config_path);
    if (!j.contains("data_dir")) throw ConfigError("meta-train config needs data_dir");
    std::string data_dir = j.at("data_dir").get<std::string>();
    Dataset source = load_dataset(data_dir);

    TrainConfig tc;
    tc.episodes = j.value("episodes", tc.episodes);
    tc.lr = j.value("lr", tc.lr);
    tc.seed = j.value("seed", static_cast<std::uint64_t>(0));
    if (auto s = env_seed()) tc.seed = *s;
    tc.episode.shots = j.value("shots", 1);
    tc.episode.queries = j.value("queries", 1);
    tc.episode.validate();

    Model model = Model::seeded(model_config_from_json(j, tc.seed));
    AdamState optim;
    long start_episode = 0;
    if (resume) {
        Checkpoint ckpt = load_checkpoint(out_dir);
        model = std::move(ckpt.model);
        optim = std::move(ckpt.optim);
        start_episode = ckpt.episodes_done;
        std::cout << "resuming from episode " << start_episode << "\n";
    }

    TrainOutcome out = meta_train(model, source, tc, optim, start_episode);
    save_checkpoint(out_dir, model, optim, out.episodes_done, data_dir);
    write_train_log_csv(std::filesystem::path(out_dir) / "train_log.csv", out.log, resume);

    double first = out.log.empty() ? 0.0 : out.log.front().total;
    double last = out.log.empty() ? 0.0 : out.log.back().total;
    std::cout << "trained episodes " << start_episode << ".." << out.episodes_done - 1
              << "  first total " << format_g9(first) << "  last total " << format_g9(last);
    if (out.skipped > 0) std::cout << "  (skipped " << out.skipped << " degenerate)";
    std::cout << "\ncheckpoint written to " << out_dir << "\n";
    return 0;
}

int cmd_meta_test(const std::string& ckpt_dir, const std::string& domain_dir,
                  const std::string& out_dir, const std::string& source_dir, int runs,
                  int episodes, int shots, int queries, std::uint64_t seed, bool no_tsf,
                  int tsf_steps, float tsf_lr, const std::string& tsf_group,
                  const std::string& combine, bool bypass_smt, bool dump_masks, int jobs) {
    Checkpoint ckpt = load_checkpoint(ckpt_dir);
    Dataset target = load_dataset(domain_dir);

    MetaTestConfig cfg;
    cfg.runs = runs;
    cfg.episodes = episodes;
    cfg.seed = seed;
    if (auto s = env_seed()) cfg.seed = *s;
    cfg.episode.shots = shots;
    cfg.episode.queries = queries;
    cfg.tsf.steps = tsf_steps;
    cfg.tsf.lr = tsf_lr;
    cfg.tsf.group = tsf_group;
    cfg.tsf_enabled = !no_tsf;
    if (combine == "fb") {
        cfg.pipeline.combine_fb = true;
    } else if (combine != "f") {
        throw ConfigError("--combine must be 'f' or 'fb'");
    }
    cfg.pipeline.bypass_smt = bypass_smt;
    cfg.jobs = jobs;
    cfg.episode.validate();
    cfg.tsf.validate();

    std::filesystem::create_directories(out_dir);
    if (dump_masks) {
        cfg.dump_dir = (std::filesystem::path(out_dir) / "masks").string();
        std::filesystem::create_directories(cfg.dump_dir);
    }

    MetaTestReport report = meta_test(ckpt.model, target, cfg);

    // Distribution-distance diagnostic against the training source when
    // available (explicit flag wins over the checkpoint manifest).
    std::optional<DistancePair> distance;
    std::string src = source_dir.empty() ? ckpt.source_data_dir : source_dir;
    if (!src.empty() && std::filesystem::exists(std::filesystem::path(src) / "manifest.json")) {
        Dataset source = load_dataset(src);
        distance = domain_distance(ckpt.model, source, target, 24);
    }

    write_report_csv(std::filesystem::path(out_dir) / "report.csv", report.rows);
    write_summary_json(std::filesystem::path(out_dir) / "summary.json", report, cfg, distance);

    std::cout << "mIoU";
    for (double m : report.run_miou) std::cout << " " << format_g9(m);
    std::cout << "\nmean " << format_g9(report.miou_mean) << "  std " << format_g9(report.miou_std)
              << "  (no-TSF mean " << format_g9(report.miou_base_mean) << ")";
    if (report.skipped > 0) std::cout << "  skipped " << report.skipped;
    std::cout << "\nreport written to " << out_dir << "\n";
    if (distance) {
        std::cout << "feature distance pre " << format_g9(distance->pre) << "  post "
                  << format_g9(distance->post) << "\n";
    }
    return 0;
}

int cmd_inspect_transform(const std::string& ckpt_dir, const std::string& domain_dir,
                          const std::string& source_dir, const std::string& out_path,
                          int episodes, int images, std::uint64_t seed) {
    Checkpoint ckpt = load_checkpoint(ckpt_dir);
    Dataset domain = load_dataset(domain_dir);
    std::string src = source_dir.empty() ? ckpt.source_data_dir : source_dir;
    if (src.empty() || !std::filesystem::exists(std::filesystem::path(src) / "manifest.json")) {
        throw ConfigError("inspect-transform needs a source dataset (--source or a checkpoint "
                          "trained with one)");
    }
    Dataset source = load_dataset(src);
    if (auto s = env_seed()) seed = *s;

    const Model& model = ckpt.model;
    const int levels = model.cfg.pyramid.levels;

    // Per-level distribution distances on image subsets.
    auto collect = [&](const Dataset& ds, std::vector<FeaturePyramid>& pyrs,
                       std::vector<std::vector<Tensor>>& ws) {
        int n = std::min<int>(images, static_cast<int>(ds.items.size()));
        for (int i = 0; i < n; ++i) {
            try {
                std::vector<Tensor> w = self_transforms(model, ds.items[static_cast<std::size_t>(i)]);
                pyrs.push_back(model.extractor.extract(ds.items[static_cast<std::size_t>(i)].image,
                                                       ExtractMode::kFilterbank));
                ws.push_back(std::move(w));
            } catch (const Error&) {
            }
        }
    };
    std::vector<FeaturePyramid> pyr_src, pyr_dom;
    std::vector<std::vector<Tensor>> w_src, w_dom;
    collect(source, pyr_src, w_src);
    collect(domain, pyr_dom, w_dom);
    if (pyr_src.empty() || pyr_dom.empty()) throw ConfigError("no usable images for inspection");

    std::vector<double> pre =
        feature_distance_per_level(pyr_src, pyr_dom, nullptr, nullptr, false);
    std::vector<double> post = feature_distance_per_level(pyr_src, pyr_dom, &w_src, &w_dom, true);

    // Solve residuals averaged over sampled episodes. Each residual uses a
    // ridge-free solve and only well-conditioned prototype matrices
    // (smallest singular value >= 1e-3) count, per the exactness property;
    // the query-role solve is taken before the pseudo-inverse blend, which trades
    // exactness for support integration by construction.
    std::vector<double> res_s(static_cast<std::size_t>(levels), 0.0);
    std::vector<double> res_q(static_cast<std::size_t>(levels), 0.0);
    std::vector<int> used_s(static_cast<std::size_t>(levels), 0);
    std::vector<int> used_q(static_cast<std::size_t>(levels), 0);
    int used = 0;
    for (int e = 0; e < episodes; ++e) {
        Rng rng(mix_seed(seed, 0x696eu, static_cast<std::uint64_t>(e)));
        try {
            EpisodeSpec es;
            EpisodeIdx ep = sample_episode(domain, es, rng);
            const Sample& sup = domain.items[static_cast<std::size_t>(ep.support[0])];
            const Sample& qry = domain.items[static_cast<std::size_t>(ep.query[0])];
            EpisodeForward fwd = episode_forward(model, {&sup}, qry.image, false);
            for (int l = 0; l < levels; ++l) {
                const SmtLevel& lvl = fwd.smt.levels[static_cast<std::size_t>(l)];
                auto ls = static_cast<std::size_t>(l);
                if (min_singular_value_2col(lvl.c_s) >= 1e-3f) {
                    Tensor w = solve_transform(lvl.a_s, pinv2(lvl.c_s, 0.0f));
                    res_s[ls] += max_abs_diff(matmul(w, lvl.c_s), lvl.a_s);
                    ++used_s[ls];
                }
                if (min_singular_value_2col(lvl.c_q) >= 1e-3f) {
                    Tensor w = solve_transform(lvl.a_q, pinv2(lvl.c_q, 0.0f));
                    res_q[ls] += max_abs_diff(matmul(w, lvl.c_q), lvl.a_q);
                    ++used_q[ls];
                }
            }
            ++used;
        } catch (const Error&) {
        }
    }
    if (used == 0) throw ConfigError("no usable episodes for inspection");

    std::ostringstream csv;
    csv << "level,dist_pre,dist_post,residual_s,residual_q\n";
    for (int l = 0; l < levels; ++l) {
        auto ls = static_cast<std::size_t>(l);
        csv << l << "," << format_g9(pre[ls]) << "," << format_g9(post[ls]) << ","
            << format_g9(used_s[ls] > 0 ? res_s[ls] / used_s[ls] : 0.0) << ","
            << format_g9(used_q[ls] > 0 ? res_q[ls] / used_q[ls] : 0.0) << "\n";
    }
    if (out_path.empty()) {
        std::cout << csv.str();
    } else {
        std::ofstream os(out_path, std::ios::trunc);
        if (!os) throw IoError("cannot write " + out_path);
        os << csv.str();
        std::cout << "wrote " << out_path << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-domain few-shot segmentation harness"};
    app.require_subcommand(1);

    std::string gd_spec, gd_out = "data";
    std::uint64_t gd_seed = 0;
    CLI::App* gen = app.add_subcommand("gen-data", "generate synthetic domain datasets");
    gen->add_option("--spec", gd_spec, "domain spec JSON (built-in default when omitted)");
    gen->add_option("--out", gd_out, "output directory");
    gen->add_option("--seed", gd_seed, "generation seed");

    std::string mt_config, mt_out = "ckpt";
    bool mt_resume = false;
    CLI::App* train = app.add_subcommand("meta-train", "episodic meta-training");
    train->add_option("--config", mt_config, "training config JSON")->required();
    train->add_option("--out", mt_out, "checkpoint directory");
    train->add_flag("--resume", mt_resume, "continue from the checkpoint in --out");

    std::string ts_ckpt, ts_domain, ts_out = "report", ts_source, ts_group = "encoder",
                ts_combine = "f";
    int ts_runs = 5, ts_episodes = 100, ts_shots = 1, ts_queries = 1, ts_steps = 40, ts_jobs = 1;
    float ts_lr = 1e-3f;
    std::uint64_t ts_seed = 0;
    bool ts_no_tsf = false, ts_bypass = false, ts_dump = false;
    CLI::App* test = app.add_subcommand("meta-test", "multi-run meta-testing with TSF");
    test->add_option("--ckpt", ts_ckpt, "checkpoint directory")->required();
    test->add_option("--domain", ts_domain, "target domain dataset directory")->required();
    test->add_option("--out", ts_out, "report directory");
    test->add_option("--source", ts_source, "source dataset for the distance diagnostic");
    test->add_option("--runs", ts_runs, "independent runs");
    test->add_option("--episodes", ts_episodes, "episodes per run");
    test->add_option("--shots", ts_shots, "K support shots");
    test->add_option("--queries", ts_queries, "Q queries per episode");
    test->add_option("--seed", ts_seed, "master seed");
    test->add_flag("--no-tsf", ts_no_tsf, "disable test-time self-finetuning");
    test->add_option("--tsf-steps", ts_steps, "TSF update steps");
    test->add_option("--tsf-lr", ts_lr, "TSF learning rate");
    test->add_option("--tsf-group", ts_group, "tuned group: low|mid|high|encoder|decoder");
    test->add_option("--combine", ts_combine, "prediction rule: f (threshold M_f) or fb");
    test->add_flag("--bypass-smt", ts_bypass, "replace both transforms with the identity");
    test->add_flag("--dump-masks", ts_dump, "write predicted masks as PGM");
    test->add_option("--jobs", ts_jobs, "episode-level parallelism");

    std::string it_ckpt, it_domain, it_source, it_out;
    int it_episodes = 20, it_images = 16;
    std::uint64_t it_seed = 0;
    CLI::App* inspect = app.add_subcommand("inspect-transform", "transform diagnostics CSV");
    inspect->add_option("--ckpt", it_ckpt, "checkpoint directory")->required();
    inspect->add_option("--domain", it_domain, "domain dataset directory")->required();
    inspect->add_option("--source", it_source, "source dataset override");
    inspect->add_option("--out", it_out, "output CSV path (stdout when omitted)");
    inspect->add_option("--episodes", it_episodes, "episodes for residual averaging");
    inspect->add_option("--images", it_images, "images per set for the distances");
    inspect->add_option("--seed", it_seed, "sampling seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (auto s = env_seed()) {
            gd_seed = *s;  // train/test read it themselves
        }
        if (gen->parsed()) return cmd_gen_data(gd_spec, gd_out, gd_seed);
        if (train->parsed()) return cmd_meta_train(mt_config, mt_out, mt_resume);
        if (test->parsed()) {
            return cmd_meta_test(ts_ckpt, ts_domain, ts_out, ts_source, ts_runs, ts_episodes,
                                 ts_shots, ts_queries, ts_seed, ts_no_tsf, ts_steps, ts_lr,
                                 ts_group, ts_combine, ts_bypass, ts_dump, ts_jobs);
        }
        if (inspect->parsed()) {
            return cmd_inspect_transform(it_ckpt, it_domain, it_source, it_out, it_episodes,
                                         it_images, it_seed);
        }
    } catch (const NonFiniteLoss& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const TruncatedPayload& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const MalformedHeader& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const Error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return 0;
}
