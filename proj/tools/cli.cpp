#include "fx/cli.hpp"

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fx/checkpoint.hpp"
#include "fx/config.hpp"
#include "fx/engine.hpp"
#include "fx/run_log.hpp"

namespace fx::cli {
namespace {

namespace fs = std::filesystem;

fs::path resolve_output(const std::string& flag, const std::string& from_config) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("FX_OUTPUT_DIR"); env && *env) return env;
    return from_config;
}

std::string cycle_dir(std::size_t cycle) {
    std::ostringstream ss;
    ss << "cycle-" << std::setw(3) << std::setfill('0') << cycle;
    return ss.str();
}

std::vector<DatasetBundle> make_bundles(const RunConfig& cfg) {
    std::vector<DatasetBundle> out;
    for (const auto& d : cfg.datasets) out.push_back(make_bundle(d, cfg.split_seed));
    return out;
}

struct PretrainArgs {
    std::string config;
    std::string output;
};

int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
    const auto cfg = load_run_config(a.config);
    const auto dir = resolve_output(a.output, cfg.output_dir);
    fs::create_directories(dir);
    {
        std::ofstream os(dir / "config.json");
        os << canonical_config(cfg);
    }
    const auto hash = config_hash(cfg);
    auto model = FoundationModel::build(cfg.arch, cfg.datasets);
    const auto data = make_bundles(cfg);

    MetricsLog metrics(dir / "metrics.csv", dir / "metrics.jsonl");
    EpochLog epochs(dir / "epochs.csv");
    PretrainHooks hooks;
    hooks.on_record = [&](const MetricsRecord& r) {
        metrics.write(r);
        out << "  eval " << r.dataset << ' ' << r.task << ' ' << r.metric << '=' << format_double(r.value) << '\n';
    };
    std::size_t last_epoch = 0;
    hooks.on_epoch = [&](const EpochSummary& s) {
        epochs.write(s);
        last_epoch = s.epoch;
        out << "cycle " << s.cycle << " epoch " << s.epoch << ' ' << s.entry.dataset << ' ' << s.entry.task_label() << ' '
            << to_string(s.entry.mode) << " loss=" << format_double(s.result.mean_loss.total) << '\n';
    };
    hooks.after_cycle = [&](std::size_t cycle, const FoundationModel& m, const TeacherState& t, const AdamW& opt) {
        save_checkpoint(dir / "checkpoints" / cycle_dir(cycle), make_checkpoint(m, t, &opt, cfg.datasets, cycle, last_epoch, hash));
    };
    auto res = run_pretraining(model, data, cfg.train, hooks);
    save_checkpoint(dir / "teacher", export_teacher(model, res.teacher, cfg.datasets, cfg.train.num_cycles, last_epoch, hash));
    out << "wrote " << (dir / "teacher").string() << '\n';
    return 0;
}

struct FinetuneArgs {
    std::string checkpoint;
    std::string config;
    std::string mode;
    std::optional<std::size_t> few_shot;
    bool init_new_head = false;
    std::optional<std::size_t> epochs;
    std::string output;
};

int cmd_finetune(const FinetuneArgs& a, std::ostream& out) {
    const auto cfg = load_run_config(a.config);
    if (!cfg.finetune) throw ConfigError(a.config + ": finetune: section required for the finetune command");
    auto section = *cfg.finetune;
    if (!a.mode.empty()) section.options.mode = parse_finetune_mode(a.mode);
    if (a.few_shot) section.options.few_shot_k = *a.few_shot;
    if (a.init_new_head) section.options.init_new_head = true;
    if (a.epochs) section.options.epochs = *a.epochs;

    const auto ckpt = load_checkpoint(a.checkpoint);
    auto model = model_from_checkpoint(ckpt);
    const auto data = make_bundle(section.dataset, cfg.split_seed);
    const auto dir = resolve_output(a.output, cfg.output_dir) / "finetune";
    fs::create_directories(dir);

    auto res = finetune(model, data, section.options, cfg.train);

    MetricsLog metrics(dir / "metrics.csv", dir / "metrics.jsonl");
    for (const auto& r : res.records) metrics.write(r);
    nlohmann::ordered_json summary{{"mode", to_string(section.options.mode)},
                                   {"dataset", section.dataset.id},
                                   {"task", to_string(section.options.task)},
                                   {"added_head", res.added_head},
                                   {"trainable_params", res.trainable_params},
                                   {"total_params", res.total_params},
                                   {"trainable_ratio", res.trainable_ratio},
                                   {"train_size", res.train_size},
                                   {"epochs", res.epochs.size()}};
    {
        std::ofstream os(dir / "finetune_log.json");
        os << summary.dump(2) << '\n';
    }
    out << "mode " << to_string(section.options.mode) << " trainable " << res.trainable_params << " / " << res.total_params
        << " (ratio " << format_double(res.trainable_ratio) << ") train_size " << res.train_size << '\n';
    for (const auto& r : res.records) out << "  epoch " << r.epoch << ' ' << r.metric << '=' << format_double(r.value) << '\n';

    auto datasets = ckpt.datasets;
    if (std::none_of(datasets.begin(), datasets.end(), [&](const SynthDatasetSpec& d) { return d.id == section.dataset.id; }))
        datasets.push_back(section.dataset);
    // Finetuning continues from the inference weights; both weight sets of the
    // result hold the finetuned values.
    const auto teacher = init_teacher(model, ckpt.momentum, false);
    auto result = make_checkpoint(model, teacher, nullptr, datasets, ckpt.cycle, ckpt.epoch, config_hash(cfg));
    result.inference = ckpt.inference;
    save_checkpoint(dir / "checkpoint", result);
    out << "wrote " << (dir / "checkpoint").string() << '\n';
    return 0;
}

struct EvalArgs {
    std::string checkpoint;
    std::string config;
    std::string dataset;
    std::string weights = "student";
    std::string task;
    std::string dump;
    std::string output;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
    const auto ckpt = load_checkpoint(a.checkpoint);
    std::optional<RunConfig> cfg;
    if (!a.config.empty()) {
        cfg = load_run_config(a.config);
        if (config_hash(*cfg) != ckpt.config_hash)
            err << "warning: config hash differs from the checkpoint's (" << a.config << ")\n";
    }
    std::optional<SynthDatasetSpec> spec;
    auto consider = [&](const std::vector<SynthDatasetSpec>& specs) {
        for (const auto& d : specs)
            if (!spec && d.id == a.dataset) spec = d;
    };
    if (cfg) {
        consider(cfg->datasets);
        if (cfg->finetune) consider({cfg->finetune->dataset});
    }
    consider(ckpt.datasets);
    if (!spec) throw std::invalid_argument("unknown dataset '" + a.dataset + "'");

    const auto weights = parse_weight_set(a.weights);
    const auto model = model_from_checkpoint(ckpt, weights);
    const auto data = make_bundle(*spec, cfg ? cfg->split_seed : 0);

    std::vector<HeadKey> keys;
    for (TaskKind task : spec->tasks) {
        if (!a.task.empty() && to_string(task) != a.task) continue;
        for (const auto& sub : spec->subtasks_of(task)) {
            HeadKey key{spec->id, task, sub};
            if (!model.has_head(key))
                throw std::invalid_argument("checkpoint has no " + to_string(task) + " head for dataset '" + spec->id + "'");
            keys.push_back(key);
        }
    }
    if (keys.empty()) throw std::invalid_argument("dataset '" + spec->id + "' has no task '" + a.task + "'");

    const fs::path dir = resolve_output(a.output, cfg ? cfg->output_dir : (fs::path(a.checkpoint) / "eval").string());
    fs::create_directories(dir);
    std::ofstream log(dir / "eval.jsonl", std::ios::app);
    nlohmann::ordered_json dump = nlohmann::ordered_json::array();
    for (const auto& key : keys) {
        const auto pred = predict(model, model.params(), data, key, data.split.test);
        const auto value = score(pred);
        const auto task = to_string(key.task) + (key.subtask.empty() ? "" : "/" + key.subtask);
        out << spec->id << ' ' << task << ' ' << metric_name(key.task) << '=' << (value ? format_double(*value) : "undefined") << '\n';
        nlohmann::ordered_json row{{"dataset", spec->id}, {"task", task}, {"weights", a.weights}, {"metric", metric_name(key.task)}};
        row["value"] = value ? nlohmann::ordered_json(*value) : nlohmann::ordered_json(nullptr);
        log << row.dump() << '\n' << std::flush;
        if (!a.dump.empty()) {
            nlohmann::ordered_json p{{"task", to_string(key.task)}, {"subtask", key.subtask}};
            if (key.task == TaskKind::Cls) {
                p["shape"] = pred.scores.shape();
                p["scores"] = pred.scores.storage();
                p["labels"] = pred.labels.storage();
            } else if (key.task == TaskKind::Loc) {
                auto& dets = p["detections"] = nlohmann::ordered_json::array();
                for (const auto& d : pred.detections)
                    dets.push_back({d.image_id, d.box.cx, d.box.cy, d.box.w, d.box.h, d.class_id, d.confidence});
                auto& gts = p["ground_truths"] = nlohmann::ordered_json::array();
                for (const auto& g : pred.ground_truths) gts.push_back({g.image_id, g.box.cx, g.box.cy, g.box.w, g.box.h, g.class_id});
            } else {
                p["shape"] = pred.pred_masks.shape();
                p["pred_masks"] = pred.pred_masks.storage();
                p["gt_masks"] = pred.gt_masks.storage();
            }
            dump.push_back(std::move(p));
        }
    }
    if (!a.dump.empty()) {
        std::ofstream os(a.dump);
        if (!os) throw std::runtime_error("cannot write '" + a.dump + "'");
        os << dump.dump() << '\n';
    }
    return 0;
}

int cmd_gen_data(const std::string& config, const std::string& output, std::ostream& out) {
    const auto cfg = load_run_config(config);
    const auto dir = resolve_output(output, cfg.output_dir) / "data";
    auto specs = cfg.datasets;
    if (cfg.finetune) specs.push_back(cfg.finetune->dataset);
    for (const auto& spec : specs) {
        save_dataset(dir / spec.id, spec, generate_dataset(spec));
        out << "wrote " << (dir / spec.id).string() << " (" << spec.num_images << " images)\n";
    }
    return 0;
}

int cmd_inspect(const std::string& checkpoint, std::ostream& out) {
    const auto ckpt = load_checkpoint(checkpoint);
    const auto census = count_params(ckpt.student);
    out << "checkpoint " << checkpoint << '\n';
    out << "cycle " << ckpt.cycle << " epoch " << ckpt.epoch << " inference " << to_string(ckpt.inference) << '\n';
    std::size_t width = 9;
    for (const auto& [id, n] : census.per_component) width = std::max(width, to_string(id).size());
    for (const auto& [id, n] : census.per_component) {
        out << std::left << std::setw(static_cast<int>(width)) << to_string(id) << "  " << std::right << std::setw(10) << n;
        for (const auto& h : ckpt.heads)
            if (h.component == id) out << "  " << to_string(h.key);
        out << '\n';
    }
    out << std::left << std::setw(static_cast<int>(width)) << "Total" << "  " << std::right << std::setw(10) << census.total << '\n';
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-task cyclic lock-release trainer on synthetic data", "fxtrain"};
    app.require_subcommand(1);

    PretrainArgs pre;
    auto* pretrain = app.add_subcommand("pretrain", "Run cyclic pretraining from a config file");
    pretrain->add_option("config", pre.config, "Run configuration (JSON)")->required();
    pretrain->add_option("-o,--output-dir", pre.output, "Output directory (overrides FX_OUTPUT_DIR and the config)");

    FinetuneArgs ft;
    auto* fine = app.add_subcommand("finetune", "Finetune a checkpoint on the config's finetune dataset");
    fine->add_option("checkpoint", ft.checkpoint, "Checkpoint directory")->required();
    fine->add_option("config", ft.config, "Run configuration with a finetune section")->required();
    fine->add_option("--mode", ft.mode, "full or head-only")->check(CLI::IsMember({"full", "head-only", "head_only"}));
    fine->add_option("--few-shot", ft.few_shot, "Use only K training samples")->check(CLI::PositiveNumber);
    fine->add_option("--epochs", ft.epochs, "Override the number of epochs")->check(CLI::PositiveNumber);
    fine->add_flag("--init-new-head", ft.init_new_head, "Create a fresh head when the checkpoint has none for the dataset");
    fine->add_option("-o,--output-dir", ft.output, "Output directory");

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset's test split");
    eval->add_option("checkpoint", ev.checkpoint, "Checkpoint directory")->required();
    eval->add_option("--dataset", ev.dataset, "Dataset id")->required();
    eval->add_option("--config", ev.config, "Run configuration supplying the dataset and split seed");
    eval->add_option("--weights", ev.weights, "student or teacher")->check(CLI::IsMember({"student", "teacher"}));
    eval->add_option("--task", ev.task, "Only this task")->check(CLI::IsMember({"cls", "loc", "seg"}));
    eval->add_option("--dump-predictions", ev.dump, "Write raw predictions as JSON");
    eval->add_option("-o,--output-dir", ev.output, "Output directory for eval.jsonl");

    std::string gen_config, gen_output;
    auto* gen = app.add_subcommand("gen-data", "Generate and save the config's synthetic datasets");
    gen->add_option("config", gen_config, "Run configuration")->required();
    gen->add_option("-o,--output-dir", gen_output, "Output directory");

    std::string inspect_path;
    auto* inspect = app.add_subcommand("inspect", "Print the per-component parameter table of a checkpoint");
    inspect->add_option("checkpoint", inspect_path, "Checkpoint directory")->required();

    std::string preset_name;
    auto* pre_cmd = app.add_subcommand("preset", "Print a built-in configuration");
    pre_cmd->add_option("name", preset_name, "Preset name")->required()->check(CLI::IsMember(preset_names()));

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "fxtrain: " << e.what() << '\n';
        if (app.get_subcommands().empty()) err << app.help();
        return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
    }

    try {
        if (*pretrain) return cmd_pretrain(pre, out);
        if (*fine) return cmd_finetune(ft, out);
        if (*eval) return cmd_eval(ev, out, err);
        if (*gen) return cmd_gen_data(gen_config, gen_output, out);
        if (*inspect) return cmd_inspect(inspect_path, out);
        if (*pre_cmd) {
            out << canonical_config(preset(preset_name));
            return 0;
        }
    } catch (const ConfigError& e) {
        err << "fxtrain: invalid config: " << e.what() << '\n';
        return 3;
    } catch (const CheckpointError& e) {
        err << "fxtrain: bad checkpoint: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        err << "fxtrain: " << e.what() << '\n';
        return 1;
    }
    return 1;
}

}  // namespace fx::cli
