// gml: train GNNs, synthesize activation-matched metamer graphs, analyze
// Jacobians, and run the invariance experiment protocols.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gml/experiments.hpp"
#include "gml/jacobian.hpp"
#include "gml/metrics.hpp"
#include "gml/synthesis.hpp"
#include "gml/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw gml::IoError("cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw gml::ConfigError(path + ": " + e.what());
    }
    return j;
}

void write_json_file(const json& j, const fs::path& path, int indent = 2) {
    std::ofstream out(path);
    if (!out) throw gml::IoError("cannot write " + path.string());
    out << j.dump(indent) << '\n';
    if (!out) throw gml::IoError("write failed: " + path.string());
}

int run_train(const std::string& config_path, const std::string& out_dir) {
    json cfg = load_json_file(config_path);
    gml::Graph graph = gml::resolve_dataset(cfg.value("dataset", json::object()));

    gml::ModelConfig mc;
    if (cfg.contains("model")) mc = gml::model_config_from_json(cfg["model"]);
    mc.in_dim = graph.feature_dim();
    mc.num_classes = graph.num_classes();
    gml::TrainConfig tc = cfg.contains("train") ? gml::train_config_from_json(cfg["train"])
                                                : gml::TrainConfig{};

    fs::create_directories(out_dir);
    gml::Model model = gml::build_model(mc);
    gml::TrainMetrics metrics =
        gml::train(model, graph, tc, (fs::path(out_dir) / "training_log.csv").string());

    gml::save_model(model, (fs::path(out_dir) / "checkpoint.json").string());
    gml::save_graph(graph, (fs::path(out_dir) / "graph.json").string());
    json summary{{"train_acc", metrics.train_acc},
                 {"test_acc", metrics.test_acc},
                 {"epochs", tc.epochs},
                 {"final_loss", metrics.loss_curve.empty() ? 0.0 : metrics.loss_curve.back()}};
    write_json_file(summary, fs::path(out_dir) / "metrics.json");
    std::cout << "trained " << gml::arch_name(mc.arch) << ": train_acc "
              << metrics.train_acc << ", test_acc " << metrics.test_acc << "\n";
    return 0;
}

int run_metamer(const std::string& model_path, const std::string& graph_path,
                const std::string& mode_name, int layer, const std::string& out_dir,
                const json& overrides) {
    gml::Model model = gml::load_model(model_path);
    gml::Graph graph = gml::load_graph_json(graph_path);
    if (model.config.in_dim != graph.feature_dim() ||
        model.config.num_classes < graph.num_classes())
        throw gml::ConfigError("checkpoint and graph disagree on dimensions");

    gml::SynthConfig sc = gml::synth_config_from_json(overrides);
    sc.mode = gml::synth_mode_from_name(mode_name);
    sc.target_layer = layer;

    fs::create_directories(out_dir);
    gml::MetamerResult result;
    gml::InvarianceReport report;
    gml::ActivationBundle orig = gml::model_forward(model, graph);
    if (sc.mode == gml::SynthMode::structure) {
        result = gml::synthesize_structure_metamer(model, graph, sc);
        gml::ActivationBundle pert =
            gml::model_forward(model, graph, nullptr, &result.hard_output);
        report.s_struct = gml::wl_kernel(graph.adjacency, result.hard_output, 3);
        report.s_match = gml::match_ratio(orig.predictions, pert.predictions);
        report.cs_struct = gml::consistency_score(*report.s_struct, *report.s_match);
    } else {
        result = gml::synthesize_feature_metamer(model, graph, sc);
        gml::ActivationBundle pert = gml::model_forward(model, graph, &result.hard_output);
        report.s_feat = gml::feature_similarity(graph.features, result.hard_output);
        report.s_match = gml::match_ratio(orig.predictions, pert.predictions);
        report.cs_feat = gml::consistency_score(*report.s_feat, *report.s_match);
    }
    report.activation_similarity = result.activation_similarity;

    gml::save_metamer_json(result, (fs::path(out_dir) / "metamer.json").string());
    write_json_file(gml::invariance_report_to_json(report),
                    fs::path(out_dir) / "report.json");
    std::cout << "metamer " << gml::synth_mode_name(sc.mode) << " layer " << layer
              << ": final_loss " << result.final_loss << ", act_sim "
              << result.activation_similarity << (result.converged ? " (converged)" : "")
              << "\n";
    return 0;
}

int run_analyze(const std::string& model_path, const std::string& graph_path,
                const std::string& nodes_csv, int layer, const std::string& variant_name,
                bool pre_activation, double tol, const std::string& out_dir) {
    gml::Model model = gml::load_model(model_path);
    gml::Graph graph = gml::load_graph_json(graph_path);

    gml::JacobianVariant variant = gml::JacobianVariant::aggregate;
    if (variant_name == "full") variant = gml::JacobianVariant::full_input;
    else if (variant_name == "concat-self") variant = gml::JacobianVariant::concat_self;
    else if (variant_name != "aggregate")
        throw gml::ConfigError("unknown variant '" + variant_name + "'");

    std::vector<int> nodes;
    std::stringstream ss(nodes_csv);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) nodes.push_back(std::stoi(tok));
    if (nodes.empty()) throw gml::ConfigError("analyze: empty node list");

    fs::create_directories(out_dir);
    gml::detail::CsvTable table;
    table.header = {"node", "rank", "metamer_dim", "sigma_max", "sigma_min"};
    for (int v : nodes) {
        gml::NodeMapSpec spec;
        spec.node = v;
        spec.layer = layer;
        spec.post_activation = !pre_activation;
        spec.variant = variant;
        gml::NodeMap map = gml::make_node_map(model, graph, spec);
        gml::Matrix jac = gml::jacobian(map.fn, map.x_ref);
        gml::JacobianReport rep = gml::local_metamer_dimension(jac, tol);

        // volume factors at this node's pre-activation row (transform maps only)
        gml::Matrix z(1, 0);
        if (variant != gml::JacobianVariant::full_input) {
            gml::Tape tape;
            gml::NodeMapSpec pre = spec;
            pre.post_activation = false;
            gml::NodeMap pre_map = gml::make_node_map(model, graph, pre);
            int leaf = tape.leaf(pre_map.x_ref);
            z = tape.value(pre_map.fn(tape, leaf));
        }

        json rep_json{{"node", v},
                      {"layer", layer},
                      {"input_dim", rep.d},
                      {"output_dim", rep.m},
                      {"rank", rep.rank},
                      {"local_metamer_dim", rep.metamer_dim},
                      {"tolerance", rep.tolerance},
                      {"singular_values", rep.singular}};
        if (z.size() > 0) {
            gml::VolumeReport vol = gml::activation_volume(
                z, model.config.activation == gml::Activation::relu
                       ? gml::VolumeActivation::relu
                       : gml::VolumeActivation::elu);
            rep_json["volume_determinant"] = vol.determinant;
            rep_json["volume_zero_count"] = vol.zero_count;
        }
        write_json_file(rep_json,
                        fs::path(out_dir) / ("node_" + std::to_string(v) + ".json"));

        table.rows.push_back(
            {std::to_string(v), std::to_string(rep.rank), std::to_string(rep.metamer_dim),
             gml::format_double(rep.singular.empty() ? 0.0 : rep.singular.front()),
             gml::format_double(rep.singular.empty() ? 0.0 : rep.singular.back())});
        std::cout << "node " << v << ": rank " << rep.rank << ", metamer dim "
                  << rep.metamer_dim << "\n";
    }
    table.save(fs::path(out_dir) / "jacobian_summary.csv");
    return 0;
}

int run_experiment_cmd(const std::string& spec_path, const std::string& out_dir,
                       int threads) {
    json spec_json = load_json_file(spec_path);
    gml::ExperimentSpec spec = gml::parse_experiment_spec(spec_json);
    if (threads > 0) spec.threads = threads;
    gml::run_experiment(spec, out_dir);
    std::cout << "experiment " << gml::experiment_name(spec.experiment) << " -> " << out_dir
              << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"graph metamer lab"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    auto* train_cmd = app.add_subcommand("train", "train a model on a dataset");
    train_cmd->add_option("--config", config_path, "JSON: {dataset, model, train}")
        ->required();
    train_cmd->add_option("--out", out_dir, "output directory")->required();

    std::string model_path, graph_path, mode_name = "feat-bin";
    int layer = 1;
    double synth_lr = -1, slope = -1, lambda_reg = -1, tol_opt = -1, rho = -1;
    int steps = -1;
    std::uint64_t seed = 0;
    auto* metamer_cmd = app.add_subcommand("metamer", "synthesize a metamer graph");
    metamer_cmd->add_option("--model", model_path, "checkpoint JSON")->required();
    metamer_cmd->add_option("--graph", graph_path, "graph JSON")->required();
    metamer_cmd->add_option("--mode", mode_name, "feat-bin | feat-cont | struct");
    metamer_cmd->add_option("--layer", layer, "target layer k");
    metamer_cmd->add_option("--steps", steps, "max optimization steps");
    metamer_cmd->add_option("--lr", synth_lr, "synthesis learning rate");
    metamer_cmd->add_option("--slope", slope, "sigmoid slope");
    metamer_cmd->add_option("--lambda-reg", lambda_reg, "margin weight");
    metamer_cmd->add_option("--rho", rho, "initial density (default: empirical)");
    metamer_cmd->add_option("--tol", tol_opt, "convergence tolerance on the loss");
    metamer_cmd->add_option("--seed", seed, "RNG seed");
    metamer_cmd->add_option("--out", out_dir, "output directory")->required();

    std::string nodes_csv, variant_name = "aggregate";
    bool pre_activation = false;
    double rank_tol = 1e-8;
    auto* analyze_cmd = app.add_subcommand("analyze", "jacobian rank / metamer dimension");
    analyze_cmd->add_option("--model", model_path, "checkpoint JSON")->required();
    analyze_cmd->add_option("--graph", graph_path, "graph JSON")->required();
    analyze_cmd->add_option("--nodes", nodes_csv, "comma-separated node ids")->required();
    analyze_cmd->add_option("--layer", layer, "layer k");
    analyze_cmd->add_option("--variant", variant_name, "aggregate | concat-self | full");
    analyze_cmd->add_flag("--pre", pre_activation, "analyze the pre-activation map");
    analyze_cmd->add_option("--tol", rank_tol, "relative rank tolerance");
    analyze_cmd->add_option("--out", out_dir, "output directory")->required();

    std::string spec_path;
    int threads = 0;
    auto* exp_cmd = app.add_subcommand("experiment", "run an experiment protocol");
    exp_cmd->add_option("--spec", spec_path, "experiment spec JSON")->required();
    exp_cmd->add_option("--out", out_dir, "output directory")->required();
    exp_cmd->add_option("--threads", threads, "parallel jobs (0 = hardware)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*train_cmd) return run_train(config_path, out_dir);
        if (*metamer_cmd) {
            json overrides = json::object();
            if (steps > 0) overrides["steps"] = steps;
            if (synth_lr > 0) overrides["lr"] = synth_lr;
            if (slope > 0) overrides["slope"] = slope;
            if (lambda_reg >= 0) overrides["lambda_reg"] = lambda_reg;
            if (rho > 0) overrides["rho_init"] = rho;
            if (tol_opt > 0) overrides["converge_tol"] = tol_opt;
            overrides["seed"] = seed;
            return run_metamer(model_path, graph_path, mode_name, layer, out_dir,
                               overrides);
        }
        if (*analyze_cmd)
            return run_analyze(model_path, graph_path, nodes_csv, layer, variant_name,
                               pre_activation, rank_tol, out_dir);
        if (*exp_cmd) return run_experiment_cmd(spec_path, out_dir, threads);
    } catch (const gml::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const gml::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const gml::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
