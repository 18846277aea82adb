#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "peftdml/checkpoint.hpp"
#include "peftdml/config.hpp"
#include "peftdml/train.hpp"

namespace fs = std::filesystem;
using namespace peftdml;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    uint64_t seed = 1;
};

std::string resolve_out_dir(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;  // flag wins over the environment
    if (const char* env = std::getenv("PEFTDML_OUT"); env != nullptr && *env != '\0') return env;
    return "out";
}

RunConfig load_config(const CommonArgs& args) {
    if (args.config_path.empty()) {
        RunConfig cfg;
        cfg.config_hash = hash_of_canonical_json(cfg.to_json());
        return cfg;
    }
    return RunConfig::load_file(args.config_path);
}

void require_hash(const std::string& found, const std::string& expected, const std::string& what) {
    if (found != expected) {
        throw ContractError("config hash mismatch: " + what + " was produced with " + found +
                            " but the current config hashes to " + expected);
    }
}

DatasetManifest load_split(const RunConfig& cfg, const std::string& out, const std::string& split) {
    DatasetManifest m = load_manifest(out + "/" + split + ".jsonl");
    require_hash(m.config_hash, cfg.config_hash, split + " manifest");
    return m;
}

nlohmann::json read_json_file(const std::string& path) {
    return nlohmann::json::parse(read_text_file(path));
}

ParameterSet load_pretrained(const RunConfig& cfg, const std::string& out) {
    nlohmann::json j = read_json_file(out + "/pretrained.json");
    require_hash(j.at("config_hash").get<std::string>(), cfg.config_hash, "pretrained backbones");
    return param_set_from_json(j.at("param_set"));
}

Checkpoint load_run_checkpoint(const RunConfig& cfg, const std::string& out) {
    Checkpoint ckpt = load_checkpoint(out + "/checkpoint.json");
    require_hash(ckpt.dataset_hash, cfg.config_hash, "checkpoint");
    return ckpt;
}

int cmd_gen_data(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    fs::create_directories(args.out_dir);
    DatasetBundle bundle = build_dataset(cfg.world, args.seed, cfg.config_hash);
    write_manifest(bundle.train, args.out_dir + "/train.jsonl");
    write_manifest(bundle.val, args.out_dir + "/val.jsonl");
    write_manifest(bundle.test, args.out_dir + "/test.jsonl");
    std::cout << "wrote " << bundle.train.records.size() << "/" << bundle.val.records.size() << "/"
              << bundle.test.records.size() << " scenes to " << args.out_dir << " (config "
              << cfg.config_hash << ")\n";
    return 0;
}

int cmd_pretrain(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    DatasetManifest train_split = load_split(cfg, args.out_dir, "train");
    DatasetManifest val_split = load_split(cfg, args.out_dir, "val");
    PretrainResult result =
        pretrain_backbones(train_split, &val_split, cfg.pretrain, args.seed, cfg.train.hidden);
    nlohmann::json j;
    j["version"] = 1;
    j["config_hash"] = cfg.config_hash;
    j["seed"] = args.seed;
    j["probe_accuracy"] = result.probe_accuracy;
    j["param_set"] = param_set_to_json(result.params);
    write_text_file(args.out_dir + "/pretrained.json", j.dump());
    std::cout << "pretrained backbones; val probe accuracy:";
    for (int m = 0; m < kNumModalities; ++m) {
        std::cout << " " << modality_name(static_cast<Modality>(m)) << "="
                  << result.probe_accuracy[m];
    }
    std::cout << "\n";
    return 0;
}

int cmd_train(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    DatasetManifest train_split = load_split(cfg, args.out_dir, "train");
    ParameterSet pretrained = load_pretrained(cfg, args.out_dir);
    Checkpoint ckpt = train(cfg.train, train_split, pretrained, args.seed);
    save_checkpoint(ckpt, args.out_dir + "/checkpoint.json");
    write_text_file(args.out_dir + "/curves.csv", curve_to_csv(ckpt));
    std::cout << "trained " << ckpt.curve.size() << " steps; final total loss "
              << ckpt.curve.back().loss.total << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& protocol) {
    RunConfig cfg = load_config(args);
    Checkpoint ckpt = load_run_checkpoint(cfg, args.out_dir);
    DatasetManifest test_split = load_split(cfg, args.out_dir, "test");

    MetricsReport report;
    if (protocol == "standard") {
        report = eval_standard(ckpt, test_split);
    } else if (protocol == "dropout") {
        DropoutEvalResult result = eval_dropout(ckpt, test_split, cfg.dropout_subsets);
        report = result.summary;
        report.map = result.reports.at("all").map;
        report.composite = result.reports.at("all").composite;
        report.errors = result.reports.at("all").errors;
    } else if (protocol == "weather") {
        WeatherEvalResult result = eval_weather(ckpt, test_split);
        report = result.summary;
        write_text_file(args.out_dir + "/weather.csv",
                        weather_to_csv(result.rows, cfg.config_hash, args.seed));
    } else if (protocol == "zeroshot") {
        DatasetManifest train_split = load_split(cfg, args.out_dir, "train");
        report = eval_standard(ckpt, test_split);
        report.protocol = "zeroshot";
        report.zero_shot_acc = eval_zero_shot(ckpt, train_split, test_split);
    } else {
        throw ConfigError("unknown protocol: " + protocol);
    }
    report.seed = args.seed;
    report.config_hash = cfg.config_hash;
    write_text_file(args.out_dir + "/metrics_" + protocol + ".json", metrics_to_json(report).dump());
    std::cout << "protocol " << protocol << ": map=" << report.map
              << " composite=" << report.composite;
    if (report.zero_shot_acc >= 0) std::cout << " zero_shot_acc=" << report.zero_shot_acc;
    std::cout << "\n";
    return 0;
}

int cmd_sweep(const CommonArgs& args, const std::string& ranks_csv) {
    RunConfig cfg = load_config(args);
    std::vector<int> ranks;
    std::stringstream ss(ranks_csv);
    std::string token;
    while (std::getline(ss, token, ',')) {
        if (!token.empty()) ranks.push_back(std::stoi(token));
    }
    std::vector<SweepRow> rows;
    if (!ranks.empty()) {
        DatasetManifest train_split = load_split(cfg, args.out_dir, "train");
        DatasetManifest test_split = load_split(cfg, args.out_dir, "test");
        ParameterSet pretrained = load_pretrained(cfg, args.out_dir);
        rows = sweep_ranks(cfg.train, ranks, train_split, test_split, pretrained, args.seed);
    }
    write_text_file(args.out_dir + "/sweep.csv", sweep_to_csv(rows, cfg.config_hash, args.seed));
    for (const auto& r : rows) {
        std::cout << "rank " << r.rank << ": trainable_fraction=" << r.trainable_fraction
                  << " composite=" << r.composite << "\n";
    }
    if (rows.empty()) std::cout << "empty sweep: header-only CSV written\n";
    return 0;
}

// verifies the hash embedded in every artifact, then writes the summary
int cmd_report(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    int verified = 0;

    auto check_csv = [&](const std::string& path) {
        if (!fs::exists(path)) return;
        std::string text = read_text_file(path);
        const std::string expect = "# config_hash=" + cfg.config_hash + " seed=";
        if (text.rfind(expect, 0) != 0) {
            throw ContractError("config hash mismatch: " + path);
        }
        ++verified;
    };
    for (const char* split : {"train", "val", "test"}) {
        const std::string path = args.out_dir + "/" + std::string(split) + ".jsonl";
        if (!fs::exists(path)) continue;
        std::istringstream in(read_text_file(path));
        std::string header;
        std::getline(in, header);
        require_hash(nlohmann::json::parse(header).at("config_hash"), cfg.config_hash, path);
        ++verified;
    }
    if (fs::exists(args.out_dir + "/pretrained.json")) {
        require_hash(read_json_file(args.out_dir + "/pretrained.json").at("config_hash"),
                     cfg.config_hash, "pretrained.json");
        ++verified;
    }
    if (fs::exists(args.out_dir + "/checkpoint.json")) {
        require_hash(load_checkpoint(args.out_dir + "/checkpoint.json").dataset_hash,
                     cfg.config_hash, "checkpoint.json");
        ++verified;
    }
    check_csv(args.out_dir + "/curves.csv");
    check_csv(args.out_dir + "/weather.csv");
    check_csv(args.out_dir + "/sweep.csv");

    std::ostringstream table;
    table << "# config_hash=" << cfg.config_hash << " seed=" << args.seed << "\n";
    table << "protocol map composite zero_shot_acc trainable_fraction\n";
    int rows = 0;
    for (const char* protocol : {"standard", "dropout", "weather", "zeroshot"}) {
        const std::string path = args.out_dir + "/metrics_" + protocol + ".json";
        if (!fs::exists(path)) continue;
        nlohmann::json j = read_json_file(path);
        require_hash(j.at("config_hash"), cfg.config_hash, path);
        ++verified;
        table << protocol << " " << j.at("map").dump() << " " << j.at("composite").dump() << " "
              << j.at("zero_shot_acc").dump() << " " << j.at("trainable_fraction").dump() << "\n";
        ++rows;
    }
    write_text_file(args.out_dir + "/summary.txt", table.str());
    std::cout << "verified " << verified << " artifacts; summary has " << rows << " protocol rows\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PEFT-DML: parameter-efficient multi-modal 3D detection on a synthetic world"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string out_flag;
    std::string protocol = "standard";
    std::string ranks = "4,8,16";

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", args.config_path, "JSON run configuration");
        cmd->add_option("--seed", args.seed, "global seed");
        cmd->add_option("--out", out_flag, "output directory (overrides PEFTDML_OUT)");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset manifests");
    add_common(gen);
    CLI::App* pre = app.add_subcommand("pretrain", "pretrain and freeze the backbone encoders");
    add_common(pre);
    CLI::App* tr = app.add_subcommand("train", "train the PEFT detection model");
    add_common(tr);
    CLI::App* ev = app.add_subcommand("eval", "run an evaluation protocol");
    add_common(ev);
    ev->add_option("--protocol", protocol, "standard|dropout|weather|zeroshot");
    CLI::App* sw = app.add_subcommand("sweep", "train and evaluate across LoRA ranks");
    add_common(sw);
    sw->add_option("--ranks", ranks, "comma-separated LoRA ranks");
    CLI::App* rep = app.add_subcommand("report", "verify artifacts and write the summary table");
    add_common(rep);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // help goes to stdout with exit 0
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << std::flush;
        return 1;
    }

    args.out_dir = resolve_out_dir(out_flag);
    try {
        if (gen->parsed()) return cmd_gen_data(args);
        if (pre->parsed()) return cmd_pretrain(args);
        if (tr->parsed()) return cmd_train(args);
        if (ev->parsed()) return cmd_eval(args, protocol);
        if (sw->parsed()) return cmd_sweep(args, ranks);
        if (rep->parsed()) return cmd_report(args);
        std::cerr << app.help();
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
