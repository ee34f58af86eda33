#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <thread>

#include <json.hpp>

#include "gml/jacobian.hpp"
#include "gml/synthesis.hpp"

namespace gml {

enum class ExperimentKind {
    feature_invariance,
    structure_invariance,
    mitigation,
    layerwise,
    cross_model,
    width_sweep,
};

inline ExperimentKind experiment_from_name(const std::string& s) {
    if (s == "feature-invariance") return ExperimentKind::feature_invariance;
    if (s == "structure-invariance") return ExperimentKind::structure_invariance;
    if (s == "mitigation") return ExperimentKind::mitigation;
    if (s == "layerwise") return ExperimentKind::layerwise;
    if (s == "cross-model") return ExperimentKind::cross_model;
    if (s == "width-sweep") return ExperimentKind::width_sweep;
    throw ConfigError("unknown experiment '" + s + "'");
}

inline const char* experiment_name(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::feature_invariance: return "feature-invariance";
        case ExperimentKind::structure_invariance: return "structure-invariance";
        case ExperimentKind::mitigation: return "mitigation";
        case ExperimentKind::layerwise: return "layerwise";
        case ExperimentKind::cross_model: return "cross-model";
        case ExperimentKind::width_sweep: return "width-sweep";
    }
    return "?";
}

struct ExperimentSpec {
    ExperimentKind experiment = ExperimentKind::feature_invariance;
    nlohmann::json dataset; // sbm spec, file paths, or a saved graph
    std::vector<Arch> archs{Arch::gcn};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    ModelConfig model;      // arch/seed/in_dim/num_classes filled per cell
    TrainConfig train;
    SynthConfig synth;
    std::vector<int> widths{16, 32, 64};
    std::vector<std::string> strategies{"elu", "adversarial", "residual"};
    int threads = 0;
    nlohmann::json raw; // the spec as parsed, embedded in outputs
};

inline SbmSpec sbm_spec_from_json(const nlohmann::json& j) {
    SbmSpec s;
    s.blocks = j.value("blocks", s.blocks);
    s.nodes_per_block = j.value("nodes_per_block", s.nodes_per_block);
    s.p_in = j.value("p_in", s.p_in);
    s.p_out = j.value("p_out", s.p_out);
    s.d = j.value("d", s.d);
    s.signal = j.value("signal", s.signal);
    s.seed = j.value("seed", s.seed);
    return s;
}

inline Graph resolve_dataset(const nlohmann::json& dataset) {
    if (dataset.is_null() || dataset.empty()) return generate_sbm(SbmSpec{.seed = 1});
    if (dataset.contains("sbm")) return generate_sbm(sbm_spec_from_json(dataset["sbm"]));
    if (dataset.contains("graph"))
        return load_graph_json(dataset["graph"].get<std::string>());
    if (dataset.contains("files")) {
        const auto& f = dataset["files"];
        return load_graph(f.at("edges").get<std::string>(),
                          f.at("features").get<std::string>(),
                          f.at("labels").get<std::string>(), f.value("header", false));
    }
    throw ConfigError("dataset: expected one of sbm/graph/files");
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig t;
    t.epochs = j.value("epochs", t.epochs);
    t.lr = j.value("lr", t.lr);
    t.weight_decay = j.value("weight_decay", t.weight_decay);
    t.adversarial = j.value("adversarial", t.adversarial);
    t.adv_epsilon = j.value("adv_epsilon", t.adv_epsilon);
    t.adv_steps = j.value("adv_steps", t.adv_steps);
    t.adv_step_size = j.value("adv_step_size", t.adv_epsilon / 4.0);
    t.seed = j.value("seed", t.seed);
    return t;
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
    SynthConfig s;
    s.target_layer = j.value("target_layer", s.target_layer);
    s.steps = j.value("steps", s.steps);
    s.lr = j.value("lr", s.lr);
    s.slope = j.value("slope", s.slope);
    s.lambda_reg = j.value("lambda_reg", s.lambda_reg);
    if (j.contains("rho_init") && j["rho_init"].is_number())
        s.rho_init = j["rho_init"].get<double>();
    if (j.contains("mode")) s.mode = synth_mode_from_name(j["mode"].get<std::string>());
    s.converge_tol = j.value("converge_tol", s.converge_tol);
    s.clip_unit = j.value("clip_unit", s.clip_unit);
    s.margin_on_structure = j.value("margin_on_structure", s.margin_on_structure);
    s.seed = j.value("seed", s.seed);
    return s;
}

inline ExperimentSpec parse_experiment_spec(const nlohmann::json& j) {
    ExperimentSpec spec;
    spec.raw = j;
    spec.experiment = experiment_from_name(j.at("experiment").get<std::string>());
    if (j.contains("dataset")) spec.dataset = j["dataset"];
    if (j.contains("archs")) {
        spec.archs.clear();
        for (const auto& a : j["archs"]) spec.archs.push_back(arch_from_name(a.get<std::string>()));
    } else if (spec.experiment == ExperimentKind::structure_invariance) {
        spec.archs = {Arch::gcn, Arch::chebnet};
    }
    if (j.contains("seeds")) {
        spec.seeds.clear();
        for (const auto& s : j["seeds"]) spec.seeds.push_back(s.get<std::uint64_t>());
    }
    if (spec.seeds.empty()) throw ConfigError("experiment: seeds must be nonempty");
    if (j.contains("model")) {
        const auto& m = j["model"];
        spec.model.layers = m.value("layers", spec.model.layers);
        spec.model.hidden_dim = m.value("hidden_dim", spec.model.hidden_dim);
        spec.model.activation = m.value("activation", std::string("relu")) == "elu"
                                    ? Activation::elu
                                    : Activation::relu;
        spec.model.residual = m.value("residual", false);
        spec.model.cheb_order = m.value("cheb_order", spec.model.cheb_order);
        spec.model.heads = m.value("heads", spec.model.heads);
        spec.model.spd_cap = m.value("spd_cap", spec.model.spd_cap);
    }
    if (spec.experiment == ExperimentKind::layerwise && !j.contains("model"))
        spec.model.layers = 4;
    if (j.contains("train")) spec.train = train_config_from_json(j["train"]);
    if (j.contains("synth")) spec.synth = synth_config_from_json(j["synth"]);
    if (j.contains("widths")) spec.widths = j["widths"].get<std::vector<int>>();
    if (j.contains("strategies"))
        spec.strategies = j["strategies"].get<std::vector<std::string>>();
    spec.threads = j.value("threads", 0);
    return spec;
}

namespace detail {

inline void run_jobs(std::vector<std::function<void()>>& jobs, int threads) {
    if (threads <= 0)
        threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    threads = std::min<int>(threads, static_cast<int>(jobs.size()));
    if (threads <= 1) {
        for (auto& job : jobs) job();
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (;;) {
                size_t i = next.fetch_add(1);
                if (i >= jobs.size()) return;
                jobs[i]();
            }
        });
    for (auto& th : pool) th.join();
}

inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << content;
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

/// Runs cell jobs with on-disk memoization: a cell whose JSON already
/// exists is loaded instead of recomputed.
class CellStore {
public:
    explicit CellStore(const std::filesystem::path& dir) : dir_(dir) {
        std::filesystem::create_directories(dir_);
    }

    nlohmann::json get_or_compute(const std::string& name,
                                  const std::function<nlohmann::json()>& compute) const {
        auto path = dir_ / (name + ".json");
        if (std::filesystem::exists(path)) {
            std::ifstream in(path);
            nlohmann::json j;
            try {
                in >> j;
                return j;
            } catch (const nlohmann::json::exception&) {
                // fall through and recompute a corrupt cell
            }
        }
        nlohmann::json j = compute();
        write_atomic(path, j.dump());
        return j;
    }

private:
    std::filesystem::path dir_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void save(const std::filesystem::path& path) const {
        std::string out;
        for (size_t i = 0; i < header.size(); ++i)
            out += header[i] + (i + 1 < header.size() ? "," : "\n");
        for (const auto& row : rows)
            for (size_t i = 0; i < row.size(); ++i)
                out += row[i] + (i + 1 < row.size() ? "," : "\n");
        write_atomic(path, out);
    }
};

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
    int n = 0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd r;
    r.n = static_cast<int>(xs.size());
    if (r.n == 0) return r;
    for (double x : xs) r.mean += x;
    r.mean /= r.n;
    if (r.n > 1) {
        double acc = 0;
        for (double x : xs) acc += (x - r.mean) * (x - r.mean);
        r.std = std::sqrt(acc / (r.n - 1));
    }
    return r;
}

inline Matrix matrix_from_json_rows(const nlohmann::json& rows) {
    Matrix m(static_cast<int>(rows.size()),
             rows.empty() ? 0 : static_cast<int>(rows[0].size()));
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) m.at(i, j) = rows[i][j].get<double>();
    return m;
}

inline nlohmann::json matrix_to_json_rows(const Matrix& m) {
    auto rows = nlohmann::json::array();
    for (int i = 0; i < m.rows; ++i)
        rows.push_back(std::vector<double>(m.row(i), m.row(i) + m.cols));
    return rows;
}

} // namespace detail

/// Feature-metamer synthesis plus its scores against a trained model.
inline nlohmann::json feature_eval(const Graph& graph, const Model& model,
                                   const SynthConfig& synth_cfg, bool keep_features) {
    if (synth_cfg.mode == SynthMode::structure)
        throw ConfigError("feature experiment with structure synth mode");
    nlohmann::json cell;
    try {
        MetamerResult r = synthesize_feature_metamer(model, graph, synth_cfg);
        double s_feat = feature_similarity(graph.features, r.hard_output);
        ActivationBundle orig = model_forward(model, graph);
        ActivationBundle pert = model_forward(model, graph, &r.hard_output);
        double s_match = match_ratio(orig.predictions, pert.predictions);
        cell["failed"] = false;
        cell["s_feat"] = s_feat;
        cell["s_match"] = s_match;
        cell["cs_feat"] = consistency_score(s_feat, s_match);
        cell["act_sim"] = r.activation_similarity;
        cell["final_loss"] = r.final_loss;
        cell["converged"] = r.converged;
        cell["rho_final"] = r.rho_final;
        if (keep_features)
            cell["metamer_features"] = detail::matrix_to_json_rows(r.hard_output);
    } catch (const DivergenceError& e) {
        cell["failed"] = true;
        cell["error"] = e.what();
    }
    return cell;
}

inline Model build_and_train(const Graph& graph, Arch arch, std::uint64_t seed,
                             const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                             double* test_acc_out = nullptr) {
    ModelConfig mc = model_cfg;
    mc.arch = arch;
    mc.seed = seed;
    mc.in_dim = graph.feature_dim();
    mc.num_classes = graph.num_classes();
    Model model = build_model(mc);
    TrainConfig tc = train_cfg;
    tc.seed = seed;
    TrainMetrics metrics = train(model, graph, tc);
    if (test_acc_out) *test_acc_out = metrics.test_acc;
    return model;
}

/// One trained-model + feature-metamer evaluation; the shared workhorse
/// behind the feature-space experiment protocols.
inline nlohmann::json feature_cell(const Graph& graph, Arch arch, std::uint64_t seed,
                                   const ModelConfig& model_cfg,
                                   const TrainConfig& train_cfg,
                                   const SynthConfig& synth_cfg,
                                   bool keep_features = false) {
    double test_acc = 0.0;
    Model model = build_and_train(graph, arch, seed, model_cfg, train_cfg, &test_acc);
    SynthConfig sc = synth_cfg;
    sc.seed = seed;
    nlohmann::json cell = feature_eval(graph, model, sc, keep_features);
    cell["arch"] = arch_name(arch);
    cell["seed"] = seed;
    cell["test_acc"] = test_acc;
    return cell;
}

inline nlohmann::json structure_cell(const Graph& graph, Arch arch, std::uint64_t seed,
                                     const ModelConfig& model_cfg,
                                     const TrainConfig& train_cfg,
                                     const SynthConfig& synth_cfg) {
    ModelConfig mc = model_cfg;
    mc.arch = arch;
    mc.seed = seed;
    mc.in_dim = graph.feature_dim();
    mc.num_classes = graph.num_classes();
    Model model = build_model(mc);
    TrainConfig tc = train_cfg;
    tc.seed = seed;
    TrainMetrics train_metrics = train(model, graph, tc);

    SynthConfig sc = synth_cfg;
    sc.seed = seed;
    sc.mode = SynthMode::structure;

    nlohmann::json cell;
    cell["arch"] = arch_name(arch);
    cell["seed"] = seed;
    cell["test_acc"] = train_metrics.test_acc;
    try {
        MetamerResult r = synthesize_structure_metamer(model, graph, sc);
        double s_struct = wl_kernel(graph.adjacency, r.hard_output, 3);
        ActivationBundle orig = model_forward(model, graph);
        ActivationBundle pert = model_forward(model, graph, nullptr, &r.hard_output);
        double s_match = match_ratio(orig.predictions, pert.predictions);
        cell["failed"] = false;
        cell["s_struct"] = s_struct;
        cell["s_match"] = s_match;
        cell["cs_struct"] = consistency_score(s_struct, s_match);
        cell["act_sim"] = r.activation_similarity;
        cell["final_loss"] = r.final_loss;
        cell["converged"] = r.converged;
    } catch (const DivergenceError& e) {
        cell["failed"] = true;
        cell["error"] = e.what();
    }
    return cell;
}

/// Mean numerical Jacobian rank of the layer-1 map over a seeded node
/// sample; nodes sitting on activation kinks are skipped.
inline double mean_layer1_rank(const Model& model, const Graph& graph, int sample_count,
                               std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> nodes(graph.n);
    std::iota(nodes.begin(), nodes.end(), 0);
    std::shuffle(nodes.begin(), nodes.end(), rng);
    double total = 0;
    int used = 0;
    for (int v : nodes) {
        if (used >= sample_count) break;
        NodeMapSpec spec;
        spec.node = v;
        spec.layer = 1;
        spec.post_activation = true;
        NodeMap map = make_node_map(model, graph, spec);
        try {
            Matrix jac = jacobian(map.fn, map.x_ref);
            total += local_metamer_dimension(jac).rank;
            ++used;
        } catch (const NumericError&) {
            continue;
        }
    }
    if (used == 0) throw NumericError("mean_layer1_rank: every sampled node sat on a kink");
    return total / used;
}

inline void run_experiment(const ExperimentSpec& spec, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    Graph graph = resolve_dataset(spec.dataset);
    detail::CellStore cells(fs::path(out_dir) / "cells");

    auto mode_for_graph = [&](SynthConfig sc) {
        if (spec.raw.contains("synth") && spec.raw["synth"].contains("mode")) return sc;
        sc.mode = graph.feature_kind == FeatureKind::binary ? SynthMode::feature_binary
                                                            : SynthMode::feature_continuous;
        return sc;
    };

    detail::CsvTable raw;
    detail::CsvTable summary;
    nlohmann::json summary_json;
    summary_json["experiment"] = experiment_name(spec.experiment);
    summary_json["spec"] = spec.raw;

    auto fmt = format_double;

    switch (spec.experiment) {
        case ExperimentKind::feature_invariance: {
            SynthConfig sc = mode_for_graph(spec.synth);
            std::vector<std::function<void()>> jobs;
            std::vector<nlohmann::json> results(spec.archs.size() * spec.seeds.size());
            for (size_t a = 0; a < spec.archs.size(); ++a)
                for (size_t s = 0; s < spec.seeds.size(); ++s)
                    jobs.push_back([&, a, s] {
                        Arch arch = spec.archs[a];
                        std::uint64_t seed = spec.seeds[s];
                        std::string name = std::string("feat_") + arch_name(arch) +
                                           "_s" + std::to_string(seed);
                        results[a * spec.seeds.size() + s] = cells.get_or_compute(
                            name, [&] {
                                return feature_cell(graph, arch, seed, spec.model,
                                                    spec.train, sc);
                            });
                    });
            detail::run_jobs(jobs, spec.threads);

            raw.header = {"arch", "seed",     "s_feat",    "s_match",  "cs_feat",
                          "act_sim", "final_loss", "converged", "test_acc", "failed"};
            summary.header = {"arch",        "n",           "s_feat_mean", "s_feat_std",
                              "s_match_mean", "s_match_std", "cs_feat_mean", "cs_feat_std",
                              "act_sim_mean", "act_sim_std"};
            for (size_t a = 0; a < spec.archs.size(); ++a) {
                std::vector<double> sf, sm, cs, as;
                for (size_t s = 0; s < spec.seeds.size(); ++s) {
                    const auto& c = results[a * spec.seeds.size() + s];
                    bool failed = c.value("failed", true);
                    raw.rows.push_back(
                        {c.value("arch", std::string(arch_name(spec.archs[a]))),
                         std::to_string(spec.seeds[s]),
                         failed ? "" : fmt(c["s_feat"].get<double>()),
                         failed ? "" : fmt(c["s_match"].get<double>()),
                         failed ? "" : fmt(c["cs_feat"].get<double>()),
                         failed ? "" : fmt(c["act_sim"].get<double>()),
                         failed ? "" : fmt(c["final_loss"].get<double>()),
                         failed ? "" : (c["converged"].get<bool>() ? "1" : "0"),
                         fmt(c["test_acc"].get<double>()), failed ? "1" : "0"});
                    if (!failed) {
                        sf.push_back(c["s_feat"].get<double>());
                        sm.push_back(c["s_match"].get<double>());
                        cs.push_back(c["cs_feat"].get<double>());
                        as.push_back(c["act_sim"].get<double>());
                    }
                }
                auto msf = detail::mean_std(sf), msm = detail::mean_std(sm),
                     mcs = detail::mean_std(cs), mas = detail::mean_std(as);
                summary.rows.push_back({arch_name(spec.archs[a]), std::to_string(msf.n),
                                        fmt(msf.mean), fmt(msf.std), fmt(msm.mean),
                                        fmt(msm.std), fmt(mcs.mean), fmt(mcs.std),
                                        fmt(mas.mean), fmt(mas.std)});
                nlohmann::json agg;
                agg["arch"] = arch_name(spec.archs[a]);
                agg["cs_feat_mean"] = mcs.mean;
                agg["cs_feat_std"] = mcs.std;
                agg["s_feat_mean"] = msf.mean;
                agg["s_match_mean"] = msm.mean;
                agg["act_sim_mean"] = mas.mean;
                summary_json["aggregates"].push_back(agg);
            }
            break;
        }

        case ExperimentKind::structure_invariance: {
            for (Arch arch : spec.archs)
                if (arch == Arch::gat || arch == Arch::graphormer_lite)
                    throw ConfigError(
                        "structure-invariance: adjacency synthesis is undefined for " +
                        std::string(arch_name(arch)));
            std::vector<std::function<void()>> jobs;
            std::vector<nlohmann::json> results(spec.archs.size() * spec.seeds.size());
            for (size_t a = 0; a < spec.archs.size(); ++a)
                for (size_t s = 0; s < spec.seeds.size(); ++s)
                    jobs.push_back([&, a, s] {
                        Arch arch = spec.archs[a];
                        std::uint64_t seed = spec.seeds[s];
                        std::string name = std::string("struct_") + arch_name(arch) +
                                           "_s" + std::to_string(seed);
                        results[a * spec.seeds.size() + s] = cells.get_or_compute(
                            name, [&] {
                                return structure_cell(graph, arch, seed, spec.model,
                                                      spec.train, spec.synth);
                            });
                    });
            detail::run_jobs(jobs, spec.threads);

            raw.header = {"arch",    "seed",       "s_struct", "s_match", "cs_struct",
                          "act_sim", "final_loss", "converged", "test_acc", "failed"};
            summary.header = {"arch", "n", "s_struct_mean", "s_struct_std", "s_match_mean",
                              "s_match_std", "cs_struct_mean", "cs_struct_std"};
            for (size_t a = 0; a < spec.archs.size(); ++a) {
                std::vector<double> ss, sm, cs;
                for (size_t s = 0; s < spec.seeds.size(); ++s) {
                    const auto& c = results[a * spec.seeds.size() + s];
                    bool failed = c.value("failed", true);
                    raw.rows.push_back(
                        {c.value("arch", std::string(arch_name(spec.archs[a]))),
                         std::to_string(spec.seeds[s]),
                         failed ? "" : fmt(c["s_struct"].get<double>()),
                         failed ? "" : fmt(c["s_match"].get<double>()),
                         failed ? "" : fmt(c["cs_struct"].get<double>()),
                         failed ? "" : fmt(c["act_sim"].get<double>()),
                         failed ? "" : fmt(c["final_loss"].get<double>()),
                         failed ? "" : (c["converged"].get<bool>() ? "1" : "0"),
                         fmt(c["test_acc"].get<double>()), failed ? "1" : "0"});
                    if (!failed) {
                        ss.push_back(c["s_struct"].get<double>());
                        sm.push_back(c["s_match"].get<double>());
                        cs.push_back(c["cs_struct"].get<double>());
                    }
                }
                auto mss = detail::mean_std(ss), msm = detail::mean_std(sm),
                     mcs = detail::mean_std(cs);
                summary.rows.push_back({arch_name(spec.archs[a]), std::to_string(mss.n),
                                        fmt(mss.mean), fmt(mss.std), fmt(msm.mean),
                                        fmt(msm.std), fmt(mcs.mean), fmt(mcs.std)});
                nlohmann::json agg;
                agg["arch"] = arch_name(spec.archs[a]);
                agg["s_struct_mean"] = mss.mean;
                agg["s_match_mean"] = msm.mean;
                agg["cs_struct_mean"] = mcs.mean;
                summary_json["aggregates"].push_back(agg);
            }
            break;
        }

        case ExperimentKind::mitigation: {
            SynthConfig sc = mode_for_graph(spec.synth);
            std::vector<std::string> strategies{"baseline"};
            for (const auto& s : spec.strategies) {
                if (s != "elu" && s != "adversarial" && s != "residual")
                    throw ConfigError("mitigation: unknown strategy '" + s + "'");
                strategies.push_back(s);
            }
            std::vector<std::function<void()>> jobs;
            std::vector<nlohmann::json> results(strategies.size() * spec.archs.size() *
                                                spec.seeds.size());
            for (size_t st = 0; st < strategies.size(); ++st)
                for (size_t a = 0; a < spec.archs.size(); ++a)
                    for (size_t s = 0; s < spec.seeds.size(); ++s)
                        jobs.push_back([&, st, a, s] {
                            const std::string& strategy = strategies[st];
                            Arch arch = spec.archs[a];
                            std::uint64_t seed = spec.seeds[s];
                            ModelConfig mc = spec.model;
                            TrainConfig tc = spec.train;
                            if (strategy == "elu") mc.activation = Activation::elu;
                            if (strategy == "residual") mc.residual = true;
                            if (strategy == "adversarial") tc.adversarial = true;
                            std::string name = "mit_" + strategy + "_" +
                                               arch_name(arch) + "_s" + std::to_string(seed);
                            size_t idx =
                                (st * spec.archs.size() + a) * spec.seeds.size() + s;
                            results[idx] = cells.get_or_compute(name, [&] {
                                auto c = feature_cell(graph, arch, seed, mc, tc, sc);
                                c["strategy"] = strategy;
                                return c;
                            });
                        });
            detail::run_jobs(jobs, spec.threads);

            raw.header = {"strategy", "arch",    "seed",      "s_feat", "s_match",
                          "cs_feat",  "act_sim", "test_acc",  "failed"};
            summary.header = {"strategy", "arch", "n", "cs_feat_mean", "cs_feat_std",
                              "delta_vs_baseline_mean"};
            for (size_t st = 0; st < strategies.size(); ++st)
                for (size_t a = 0; a < spec.archs.size(); ++a) {
                    std::vector<double> cs, deltas;
                    for (size_t s = 0; s < spec.seeds.size(); ++s) {
                        size_t idx = (st * spec.archs.size() + a) * spec.seeds.size() + s;
                        size_t base_idx = a * spec.seeds.size() + s; // strategies[0]
                        const auto& c = results[idx];
                        bool failed = c.value("failed", true);
                        raw.rows.push_back(
                            {strategies[st], arch_name(spec.archs[a]),
                             std::to_string(spec.seeds[s]),
                             failed ? "" : fmt(c["s_feat"].get<double>()),
                             failed ? "" : fmt(c["s_match"].get<double>()),
                             failed ? "" : fmt(c["cs_feat"].get<double>()),
                             failed ? "" : fmt(c["act_sim"].get<double>()),
                             fmt(c["test_acc"].get<double>()), failed ? "1" : "0"});
                        if (failed) continue;
                        cs.push_back(c["cs_feat"].get<double>());
                        const auto& base = results[base_idx];
                        if (st > 0 && !base.value("failed", true))
                            deltas.push_back(c["cs_feat"].get<double>() -
                                             base["cs_feat"].get<double>());
                    }
                    auto mcs = detail::mean_std(cs);
                    auto mdl = detail::mean_std(deltas);
                    summary.rows.push_back({strategies[st], arch_name(spec.archs[a]),
                                            std::to_string(mcs.n), fmt(mcs.mean),
                                            fmt(mcs.std), st > 0 ? fmt(mdl.mean) : "0"});
                    nlohmann::json agg;
                    agg["strategy"] = strategies[st];
                    agg["arch"] = arch_name(spec.archs[a]);
                    agg["cs_feat_mean"] = mcs.mean;
                    agg["delta_vs_baseline_mean"] = st > 0 ? mdl.mean : 0.0;
                    summary_json["aggregates"].push_back(agg);
                }
            break;
        }

        case ExperimentKind::width_sweep: {
            SynthConfig sc = mode_for_graph(spec.synth);
            std::vector<std::function<void()>> jobs;
            std::vector<nlohmann::json> results(spec.archs.size() * spec.widths.size() *
                                                spec.seeds.size());
            for (size_t a = 0; a < spec.archs.size(); ++a)
                for (size_t w = 0; w < spec.widths.size(); ++w)
                    for (size_t s = 0; s < spec.seeds.size(); ++s)
                        jobs.push_back([&, a, w, s] {
                            Arch arch = spec.archs[a];
                            int width = spec.widths[w];
                            std::uint64_t seed = spec.seeds[s];
                            ModelConfig mc = spec.model;
                            mc.hidden_dim = width;
                            std::string name = std::string("width_") + arch_name(arch) +
                                               "_w" + std::to_string(width) + "_s" +
                                               std::to_string(seed);
                            size_t idx =
                                (a * spec.widths.size() + w) * spec.seeds.size() + s;
                            results[idx] = cells.get_or_compute(name, [&] {
                                double test_acc = 0.0;
                                Model model = build_and_train(graph, arch, seed, mc,
                                                              spec.train, &test_acc);
                                SynthConfig scs = sc;
                                scs.seed = seed;
                                auto c = feature_eval(graph, model, scs, false);
                                c["arch"] = arch_name(arch);
                                c["seed"] = seed;
                                c["test_acc"] = test_acc;
                                c["width"] = width;
                                c["mean_rank"] = mean_layer1_rank(model, graph, 20, seed);
                                return c;
                            });
                        });
            detail::run_jobs(jobs, spec.threads);

            raw.header = {"arch",   "width",   "seed",      "cs_feat", "s_feat",
                          "s_match", "act_sim", "mean_rank", "failed"};
            summary.header = {"arch", "width", "n", "cs_feat_mean", "cs_feat_std",
                              "mean_rank_mean"};
            for (size_t a = 0; a < spec.archs.size(); ++a)
                for (size_t w = 0; w < spec.widths.size(); ++w) {
                    std::vector<double> cs, ranks;
                    for (size_t s = 0; s < spec.seeds.size(); ++s) {
                        size_t idx = (a * spec.widths.size() + w) * spec.seeds.size() + s;
                        const auto& c = results[idx];
                        bool failed = c.value("failed", true);
                        raw.rows.push_back(
                            {arch_name(spec.archs[a]), std::to_string(spec.widths[w]),
                             std::to_string(spec.seeds[s]),
                             failed ? "" : fmt(c["cs_feat"].get<double>()),
                             failed ? "" : fmt(c["s_feat"].get<double>()),
                             failed ? "" : fmt(c["s_match"].get<double>()),
                             failed ? "" : fmt(c["act_sim"].get<double>()),
                             c.contains("mean_rank") ? fmt(c["mean_rank"].get<double>())
                                                     : "",
                             failed ? "1" : "0"});
                        if (!failed) {
                            cs.push_back(c["cs_feat"].get<double>());
                            if (c.contains("mean_rank"))
                                ranks.push_back(c["mean_rank"].get<double>());
                        }
                    }
                    auto mcs = detail::mean_std(cs);
                    auto mrk = detail::mean_std(ranks);
                    summary.rows.push_back({arch_name(spec.archs[a]),
                                            std::to_string(spec.widths[w]),
                                            std::to_string(mcs.n), fmt(mcs.mean),
                                            fmt(mcs.std), fmt(mrk.mean)});
                    nlohmann::json agg;
                    agg["arch"] = arch_name(spec.archs[a]);
                    agg["width"] = spec.widths[w];
                    agg["cs_feat_mean"] = mcs.mean;
                    agg["mean_rank_mean"] = mrk.mean;
                    summary_json["aggregates"].push_back(agg);
                }
            break;
        }

        case ExperimentKind::layerwise: {
            SynthConfig sc = mode_for_graph(spec.synth);
            int layers = spec.model.layers;
            std::vector<int> ks;
            for (int k = 1; k <= std::min(layers - 1, 3); ++k) ks.push_back(k);
            if (ks.empty()) ks.push_back(1);

            std::vector<std::function<void()>> jobs;
            std::vector<nlohmann::json> results(spec.archs.size() * spec.seeds.size());
            for (size_t a = 0; a < spec.archs.size(); ++a)
                for (size_t s = 0; s < spec.seeds.size(); ++s)
                    jobs.push_back([&, a, s] {
                        Arch arch = spec.archs[a];
                        std::uint64_t seed = spec.seeds[s];
                        std::string name = std::string("layer_") + arch_name(arch) +
                                           "_s" + std::to_string(seed);
                        results[a * spec.seeds.size() + s] =
                            cells.get_or_compute(name, [&] {
                                nlohmann::json cell;
                                cell["arch"] = arch_name(arch);
                                cell["seed"] = seed;
                                cell["per_k"] = nlohmann::json::array();
                                double test_acc = 0.0;
                                Model model = build_and_train(graph, arch, seed,
                                                              spec.model, spec.train,
                                                              &test_acc);
                                cell["test_acc"] = test_acc;
                                for (int k : ks) {
                                    SynthConfig sck = sc;
                                    sck.target_layer = k;
                                    sck.seed = seed;
                                    auto c = feature_eval(graph, model, sck, false);
                                    c["k"] = k;
                                    cell["per_k"].push_back(c);
                                }
                                return cell;
                            });
                    });
            detail::run_jobs(jobs, spec.threads);

            raw.header = {"arch", "seed", "k",       "cs_feat", "s_feat",
                          "s_match", "act_sim", "failed"};
            summary.header = {"arch", "k", "n", "cs_feat_mean", "cs_feat_std",
                              "act_sim_mean"};
            for (size_t a = 0; a < spec.archs.size(); ++a) {
                for (size_t ki = 0; ki < ks.size(); ++ki) {
                    std::vector<double> cs, as;
                    for (size_t s = 0; s < spec.seeds.size(); ++s) {
                        const auto& cell = results[a * spec.seeds.size() + s];
                        const auto& c = cell["per_k"][ki];
                        bool failed = c.value("failed", true);
                        raw.rows.push_back(
                                {arch_name(spec.archs[a]), std::to_string(spec.seeds[s]),
                                 std::to_string(ks[ki]),
                                 failed ? "" : fmt(c["cs_feat"].get<double>()),
                                 failed ? "" : fmt(c["s_feat"].get<double>()),
                                 failed ? "" : fmt(c["s_match"].get<double>()),
                                 failed ? "" : fmt(c["act_sim"].get<double>()),
                                 failed ? "1" : "0"});
                        if (!failed) {
                            cs.push_back(c["cs_feat"].get<double>());
                            as.push_back(c["act_sim"].get<double>());
                        }
                    }
                    auto mcs = detail::mean_std(cs);
                    auto mas = detail::mean_std(as);
                    summary.rows.push_back({arch_name(spec.archs[a]), std::to_string(ks[ki]),
                                            std::to_string(mcs.n), fmt(mcs.mean),
                                            fmt(mcs.std), fmt(mas.mean)});
                    nlohmann::json agg;
                    agg["arch"] = arch_name(spec.archs[a]);
                    agg["k"] = ks[ki];
                    agg["cs_feat_mean"] = mcs.mean;
                    agg["act_sim_mean"] = mas.mean;
                    summary_json["aggregates"].push_back(agg);
                }
            }
            break;
        }

        case ExperimentKind::cross_model: {
            if (spec.archs.size() < 2)
                throw ConfigError("cross-model: need at least two architectures");
            SynthConfig sc = mode_for_graph(spec.synth);

            // pass A: per source arch, train and generate the feature metamer
            std::vector<std::function<void()>> jobs;
            std::vector<nlohmann::json> sources(spec.archs.size() * spec.seeds.size());
            for (size_t a = 0; a < spec.archs.size(); ++a)
                for (size_t s = 0; s < spec.seeds.size(); ++s)
                    jobs.push_back([&, a, s] {
                        Arch arch = spec.archs[a];
                        std::uint64_t seed = spec.seeds[s];
                        std::string name = std::string("xsrc_") + arch_name(arch) + "_s" +
                                           std::to_string(seed);
                        sources[a * spec.seeds.size() + s] = cells.get_or_compute(
                            name, [&] {
                                return feature_cell(graph, arch, seed, spec.model,
                                                    spec.train, sc, true);
                            });
                    });
            detail::run_jobs(jobs, spec.threads);

            // pass B: retrain every target arch on every source's metamer
            std::vector<std::function<void()>> jobs_b;
            std::vector<nlohmann::json> pairs(spec.archs.size() * spec.archs.size() *
                                              spec.seeds.size());
            for (size_t t = 0; t < spec.archs.size(); ++t)
                for (size_t a = 0; a < spec.archs.size(); ++a)
                    for (size_t s = 0; s < spec.seeds.size(); ++s)
                        jobs_b.push_back([&, t, a, s] {
                            Arch target = spec.archs[t];
                            Arch source = spec.archs[a];
                            std::uint64_t seed = spec.seeds[s];
                            const auto& src = sources[a * spec.seeds.size() + s];
                            size_t idx =
                                (t * spec.archs.size() + a) * spec.seeds.size() + s;
                            std::string name = std::string("xpair_") + arch_name(target) +
                                               "_from_" + arch_name(source) + "_s" +
                                               std::to_string(seed);
                            pairs[idx] = cells.get_or_compute(name, [&]() -> nlohmann::json {
                                nlohmann::json cell;
                                cell["target"] = arch_name(target);
                                cell["source"] = arch_name(source);
                                cell["seed"] = seed;
                                if (src.value("failed", true)) {
                                    cell["failed"] = true;
                                    cell["error"] = "source metamer failed";
                                    return cell;
                                }
                                Graph trained_on = graph;
                                trained_on.features = detail::matrix_from_json_rows(
                                    src["metamer_features"]);
                                bool bin = true;
                                for (double v : trained_on.features.data)
                                    if (v != 0.0 && v != 1.0) bin = false;
                                trained_on.feature_kind =
                                    bin ? FeatureKind::binary : FeatureKind::continuous;
                                ModelConfig mc = spec.model;
                                mc.arch = target;
                                mc.seed = seed;
                                mc.in_dim = trained_on.feature_dim();
                                mc.num_classes = trained_on.num_classes();
                                Model model = build_model(mc);
                                TrainConfig tc = spec.train;
                                tc.seed = seed;
                                train(model, trained_on, tc);
                                // evaluate on the original test features
                                ActivationBundle bundle =
                                    model_forward(model, graph);
                                cell["failed"] = false;
                                cell["acc"] = masked_accuracy(
                                    bundle.predictions, graph.labels, graph.test_mask);
                                return cell;
                            });
                        });
            detail::run_jobs(jobs_b, spec.threads);

            raw.header = {"target", "source", "seed", "acc", "failed"};
            summary.header = {"target", "source", "n", "acc_mean", "acc_std"};
            for (size_t t = 0; t < spec.archs.size(); ++t) {
                // the Original column: the target trained on clean features
                std::vector<double> orig;
                for (size_t s = 0; s < spec.seeds.size(); ++s) {
                    const auto& src = sources[t * spec.seeds.size() + s];
                    raw.rows.push_back({arch_name(spec.archs[t]), "original",
                                        std::to_string(spec.seeds[s]),
                                        fmt(src["test_acc"].get<double>()), "0"});
                    orig.push_back(src["test_acc"].get<double>());
                }
                auto mo = detail::mean_std(orig);
                summary.rows.push_back({arch_name(spec.archs[t]), "original",
                                        std::to_string(mo.n), fmt(mo.mean), fmt(mo.std)});
                nlohmann::json agg;
                agg["target"] = arch_name(spec.archs[t]);
                agg["source"] = "original";
                agg["acc_mean"] = mo.mean;
                agg["acc_std"] = mo.std;
                summary_json["aggregates"].push_back(agg);

                for (size_t a = 0; a < spec.archs.size(); ++a) {
                    std::vector<double> accs;
                    for (size_t s = 0; s < spec.seeds.size(); ++s) {
                        size_t idx = (t * spec.archs.size() + a) * spec.seeds.size() + s;
                        const auto& c = pairs[idx];
                        bool failed = c.value("failed", true);
                        raw.rows.push_back({arch_name(spec.archs[t]),
                                            arch_name(spec.archs[a]),
                                            std::to_string(spec.seeds[s]),
                                            failed ? "" : fmt(c["acc"].get<double>()),
                                            failed ? "1" : "0"});
                        if (!failed) accs.push_back(c["acc"].get<double>());
                    }
                    auto ma = detail::mean_std(accs);
                    summary.rows.push_back({arch_name(spec.archs[t]),
                                            arch_name(spec.archs[a]), std::to_string(ma.n),
                                            fmt(ma.mean), fmt(ma.std)});
                    nlohmann::json agg2;
                    agg2["target"] = arch_name(spec.archs[t]);
                    agg2["source"] = arch_name(spec.archs[a]);
                    agg2["acc_mean"] = ma.mean;
                    agg2["acc_std"] = ma.std;
                    summary_json["aggregates"].push_back(agg2);
                }
            }
            break;
        }
    }

    raw.save(std::filesystem::path(out_dir) / "raw.csv");
    summary.save(std::filesystem::path(out_dir) / "summary.csv");
    detail::write_atomic(std::filesystem::path(out_dir) / "summary.json",
                         summary_json.dump(2));
}

} // namespace gml
