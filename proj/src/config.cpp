#include "fx/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "fx/hash.hpp"

namespace fx {
namespace {

using nlohmann::json;

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

std::size_t as_size(const json& j, const std::string& path) {
    if (j.is_number_unsigned()) return j.get<std::size_t>();
    if (j.is_number_integer() && j.get<std::int64_t>() >= 0) return j.get<std::size_t>();
    throw ConfigError(path + ": expected a non-negative integer, got " + j.dump());
}

double as_double(const json& j, const std::string& path) {
    if (!j.is_number()) throw ConfigError(path + ": expected a number, got " + j.dump());
    return j.get<double>();
}

bool as_bool(const json& j, const std::string& path) {
    if (!j.is_boolean()) throw ConfigError(path + ": expected true or false, got " + j.dump());
    return j.get<bool>();
}

std::string as_string(const json& j, const std::string& path) {
    if (!j.is_string()) throw ConfigError(path + ": expected a string, got " + j.dump());
    return j.get<std::string>();
}

std::vector<std::string> as_strings(const json& j, const std::string& path) {
    if (!j.is_array()) throw ConfigError(path + ": expected a list of strings");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(as_string(j[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

TaskKind as_task(const json& j, const std::string& path) {
    const auto s = as_string(j, path);
    try {
        return parse_task(s);
    } catch (const std::invalid_argument&) {
        throw ConfigError(path + ": unknown task '" + s + "' (expected cls, loc or seg)");
    }
}

/// Visits the keys of one JSON object and rejects any it was not asked about.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError((path_.empty() ? "config" : path_) + ": expected an object");
    }

    const json* find(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    std::string at(const std::string& key) const { return join(path_, key); }

    void size(const std::string& key, std::size_t& out) {
        if (auto* v = find(key)) out = as_size(*v, at(key));
    }
    void u64(const std::string& key, std::uint64_t& out) {
        if (auto* v = find(key)) out = as_size(*v, at(key));
    }
    void real(const std::string& key, double& out) {
        if (auto* v = find(key)) out = as_double(*v, at(key));
    }
    void flag(const std::string& key, bool& out) {
        if (auto* v = find(key)) out = as_bool(*v, at(key));
    }
    void text(const std::string& key, std::string& out) {
        if (auto* v = find(key)) out = as_string(*v, at(key));
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.contains(k)) throw ConfigError(join(path_, k) + ": unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <typename Fn>
void validated(const std::string& where, Fn&& fn) {
    try {
        fn();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

json train_to_json(const TrainConfig& t) {
    json lr;
    for (auto [task, on] : t.lock_release) lr[to_string(task)] = on;
    return json{{"lr_backbone", t.lr_backbone},
                {"lr_loc", t.lr_loc},
                {"lr_seg", t.lr_seg},
                {"lr_cls_head", t.lr_cls_head},
                {"momentum", t.momentum},
                {"lock_release", lr},
                {"step_decay_factor", t.step_decay_factor},
                {"step_decay_interval", t.step_decay_interval},
                {"epochs_per_task", t.epochs_per_task},
                {"num_cycles", t.num_cycles},
                {"batch_size", t.batch_size},
                {"weight_decay", t.weight_decay},
                {"consistency_weight", t.consistency_weight},
                {"student_teacher", t.student_teacher},
                {"mirror_heads", t.mirror_heads},
                {"eval_after_release", t.eval_after_release},
                {"eval_all_every_epoch", t.eval_all_every_epoch},
                {"loc_weights",
                 {{"cls", t.loc_weights.cls}, {"l1", t.loc_weights.l1}, {"iou", t.loc_weights.iou}, {"no_object", t.loc_weights.no_object}}},
                {"seed", t.seed}};
}

TrainConfig train_from_json(const json& j, const std::string& path) {
    TrainConfig t;
    Fields f(j, path);
    f.real("lr_backbone", t.lr_backbone);
    f.real("lr_loc", t.lr_loc);
    f.real("lr_seg", t.lr_seg);
    f.real("lr_cls_head", t.lr_cls_head);
    f.real("momentum", t.momentum);
    if (auto* lr = f.find("lock_release")) {
        Fields g(*lr, f.at("lock_release"));
        for (TaskKind task : {TaskKind::Cls, TaskKind::Loc, TaskKind::Seg}) g.flag(to_string(task), t.lock_release[task]);
        g.finish();
    }
    f.real("step_decay_factor", t.step_decay_factor);
    f.size("step_decay_interval", t.step_decay_interval);
    f.size("epochs_per_task", t.epochs_per_task);
    f.size("num_cycles", t.num_cycles);
    f.size("batch_size", t.batch_size);
    f.real("weight_decay", t.weight_decay);
    f.real("consistency_weight", t.consistency_weight);
    f.flag("student_teacher", t.student_teacher);
    f.flag("mirror_heads", t.mirror_heads);
    f.flag("eval_after_release", t.eval_after_release);
    f.flag("eval_all_every_epoch", t.eval_all_every_epoch);
    if (auto* w = f.find("loc_weights")) {
        Fields g(*w, f.at("loc_weights"));
        g.real("cls", t.loc_weights.cls);
        g.real("l1", t.loc_weights.l1);
        g.real("iou", t.loc_weights.iou);
        g.real("no_object", t.loc_weights.no_object);
        g.finish();
    }
    f.u64("seed", t.seed);
    f.finish();
    validated(path, [&] { t.validate(); });
    return t;
}

json finetune_to_json(const FinetuneSection& s) {
    json j{{"dataset", dataset_spec_to_json(s.dataset)},
           {"mode", to_string(s.options.mode)},
           {"task", to_string(s.options.task)},
           {"subtask", s.options.subtask},
           {"epochs", s.options.epochs},
           {"init_new_head", s.options.init_new_head},
           {"seed", s.options.seed}};
    j["few_shot_k"] = s.options.few_shot_k ? json(*s.options.few_shot_k) : json(nullptr);
    return j;
}

FinetuneSection finetune_from_json(const json& j, const std::string& path) {
    FinetuneSection s;
    Fields f(j, path);
    if (auto* d = f.find("dataset")) s.dataset = dataset_spec_from_json(*d, f.at("dataset"));
    else throw ConfigError(f.at("dataset") + ": required");
    if (auto* m = f.find("mode")) {
        const auto text = as_string(*m, f.at("mode"));
        validated(f.at("mode"), [&] { s.options.mode = parse_finetune_mode(text); });
    }
    if (auto* t = f.find("task")) s.options.task = as_task(*t, f.at("task"));
    f.text("subtask", s.options.subtask);
    f.size("epochs", s.options.epochs);
    if (auto* k = f.find("few_shot_k"); k && !k->is_null()) s.options.few_shot_k = as_size(*k, f.at("few_shot_k"));
    f.flag("init_new_head", s.options.init_new_head);
    f.u64("seed", s.options.seed);
    f.finish();
    if (s.options.epochs == 0) throw ConfigError(f.at("epochs") + ": must be positive");
    if (!s.dataset.has_task(s.options.task))
        throw ConfigError(f.at("task") + ": dataset '" + s.dataset.id + "' has no " + to_string(s.options.task) + " annotations");
    return s;
}

}  // namespace

nlohmann::json dataset_spec_to_json(const SynthDatasetSpec& spec) {
    json tasks = json::array();
    for (auto t : spec.tasks) tasks.push_back(to_string(t));
    json subtasks = json::object();
    for (const auto& [t, names] : spec.subtasks) subtasks[to_string(t)] = names;
    return json{{"id", spec.id},
                {"num_images", spec.num_images},
                {"image_size", spec.image_size},
                {"shape_classes", spec.shape_classes},
                {"class_names", spec.class_names},
                {"tasks", tasks},
                {"subtasks", subtasks},
                {"noise_level", spec.noise_level},
                {"seed", spec.seed}};
}

SynthDatasetSpec dataset_spec_from_json(const nlohmann::json& j, const std::string& path) {
    SynthDatasetSpec s;
    Fields f(j, path);
    f.text("id", s.id);
    f.size("num_images", s.num_images);
    f.size("image_size", s.image_size);
    if (auto* v = f.find("shape_classes")) s.shape_classes = as_strings(*v, f.at("shape_classes"));
    if (auto* v = f.find("class_names")) s.class_names = as_strings(*v, f.at("class_names"));
    if (auto* v = f.find("tasks")) {
        if (!v->is_array()) throw ConfigError(f.at("tasks") + ": expected a list of tasks");
        s.tasks.clear();
        for (std::size_t i = 0; i < v->size(); ++i) s.tasks.push_back(as_task((*v)[i], f.at("tasks") + "[" + std::to_string(i) + "]"));
    }
    if (auto* v = f.find("subtasks")) {
        if (!v->is_object()) throw ConfigError(f.at("subtasks") + ": expected an object of task -> names");
        for (const auto& [k, names] : v->items()) {
            const auto p = f.at("subtasks") + "." + k;
            s.subtasks[as_task(json(k), p)] = as_strings(names, p);
        }
    }
    f.real("noise_level", s.noise_level);
    f.u64("seed", s.seed);
    f.finish();
    validated(path, [&] { s.validate(); });
    return s;
}

nlohmann::json arch_to_json(const ArchConfig& a) {
    return json{{"image_size", a.image_size},           {"in_channels", a.in_channels},
                {"stage1_channels", a.stage1_channels}, {"stage2_channels", a.stage2_channels},
                {"stage3_channels", a.stage3_channels}, {"loc_enc_channels", a.loc_enc_channels},
                {"loc_hidden", a.loc_hidden},           {"num_queries", a.num_queries},
                {"seg_channels", a.seg_channels},       {"seed", a.seed}};
}

ArchConfig arch_from_json(const nlohmann::json& j, const std::string& path) {
    ArchConfig a;
    Fields f(j, path);
    f.size("image_size", a.image_size);
    f.size("in_channels", a.in_channels);
    f.size("stage1_channels", a.stage1_channels);
    f.size("stage2_channels", a.stage2_channels);
    f.size("stage3_channels", a.stage3_channels);
    f.size("loc_enc_channels", a.loc_enc_channels);
    f.size("loc_hidden", a.loc_hidden);
    f.size("num_queries", a.num_queries);
    f.size("seg_channels", a.seg_channels);
    f.u64("seed", a.seed);
    f.finish();
    validated(path, [&] { a.validate(); });
    return a;
}

void RunConfig::validate() const {
    if (datasets.empty()) throw ConfigError("datasets: at least one dataset is required");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < datasets.size(); ++i) {
        const auto where = "datasets[" + std::to_string(i) + "]";
        validated(where, [&] { datasets[i].validate(); });
        if (!ids.insert(datasets[i].id).second) throw ConfigError(where + ".id: duplicate dataset id '" + datasets[i].id + "'");
        if (datasets[i].image_size != arch.image_size)
            throw ConfigError(where + ".image_size: must equal arch.image_size (" + std::to_string(arch.image_size) + ")");
    }
    validated("arch", [&] { arch.validate(); });
    validated("train", [&] { train.validate(); });
    if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
    if (finetune && finetune->dataset.image_size != arch.image_size)
        throw ConfigError("finetune.dataset.image_size: must equal arch.image_size");
}

nlohmann::json to_json(const RunConfig& c) {
    json datasets = json::array();
    for (const auto& d : c.datasets) datasets.push_back(dataset_spec_to_json(d));
    json j{{"datasets", datasets},
           {"arch", arch_to_json(c.arch)},
           {"train", train_to_json(c.train)},
           {"output_dir", c.output_dir},
           {"split_seed", c.split_seed}};
    j["finetune"] = c.finetune ? finetune_to_json(*c.finetune) : json(nullptr);
    return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    Fields f(j, "");
    if (auto* a = f.find("arch")) c.arch = arch_from_json(*a, "arch");
    if (auto* d = f.find("datasets")) {
        if (!d->is_array()) throw ConfigError("datasets: expected a list");
        for (std::size_t i = 0; i < d->size(); ++i)
            c.datasets.push_back(dataset_spec_from_json((*d)[i], "datasets[" + std::to_string(i) + "]"));
    }
    if (auto* t = f.find("train")) c.train = train_from_json(*t, "train");
    f.text("output_dir", c.output_dir);
    f.u64("split_seed", c.split_seed);
    if (auto* ft = f.find("finetune"); ft && !ft->is_null()) c.finetune = finetune_from_json(*ft, "finetune");
    f.finish();
    c.validate();
    return c;
}

RunConfig parse_run_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("parse error: ") + e.what());
    }
    return run_config_from_json(j);
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    try {
        return parse_run_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string canonical_config(const RunConfig& config) { return to_json(config).dump(2) + "\n"; }

std::uint64_t config_hash(const RunConfig& config) { return fnv1a(to_json(config).dump()); }

std::vector<std::string> preset_names() { return {"table3", "smoke", "ablation-loc", "finetune-loc"}; }

RunConfig preset(const std::string& name) {
    RunConfig c;
    c.arch = ArchConfig{};
    auto toy_rates = [](TrainConfig& t) {
        t.lr_backbone = 1e-3;
        t.lr_loc = 1e-2;
        t.lr_seg = 1e-2;
        t.lr_cls_head = 1e-2;
        t.batch_size = 8;
    };
    if (name == "table3") {
        SynthDatasetSpec d;
        d.id = "organs";
        d.num_images = 40;
        d.class_names = {"heart", "left_lung", "right_lung"};
        d.tasks = {TaskKind::Loc, TaskKind::Seg};
        d.subtasks[TaskKind::Loc] = d.class_names;
        d.subtasks[TaskKind::Seg] = d.class_names;
        d.seed = 3;
        c.datasets = {d};
        c.train.num_cycles = 2;
        c.train.batch_size = 8;
        c.output_dir = "runs/table3";
    } else if (name == "smoke") {
        SynthDatasetSpec a, b, full;
        a.id = "synth-cls";
        a.tasks = {TaskKind::Cls};
        a.seed = 11;
        b.id = "synth-cls-loc";
        b.tasks = {TaskKind::Cls, TaskKind::Loc};
        b.seed = 12;
        full.id = "synth-full";
        full.tasks = {TaskKind::Cls, TaskKind::Loc, TaskKind::Seg};
        full.seed = 13;
        c.datasets = {a, b, full};
        toy_rates(c.train);
        c.train.num_cycles = 5;
        c.train.epochs_per_task = 6;
        c.output_dir = "runs/smoke";
    } else if (name == "ablation-loc") {
        SynthDatasetSpec d;
        d.id = "synth-loc";
        d.tasks = {TaskKind::Loc};
        d.seed = 21;
        c.datasets = {d};
        toy_rates(c.train);
        c.train.num_cycles = 5;
        c.train.epochs_per_task = 4;
        c.output_dir = "runs/ablation-loc";
    } else if (name == "finetune-loc") {
        SynthDatasetSpec a, b;
        a.id = "synth-cls-loc";
        a.num_images = 100;
        a.tasks = {TaskKind::Cls, TaskKind::Loc};
        a.seed = 31;
        b.id = "synth-full";
        b.num_images = 100;
        b.tasks = {TaskKind::Cls, TaskKind::Loc, TaskKind::Seg};
        b.seed = 32;
        c.datasets = {a, b};
        toy_rates(c.train);
        c.train.num_cycles = 1;
        FinetuneSection ft;
        ft.dataset.id = "synth-new-loc";
        ft.dataset.num_images = 100;
        ft.dataset.tasks = {TaskKind::Loc};
        ft.dataset.seed = 33;
        ft.options.mode = FinetuneMode::HeadOnly;
        ft.options.task = TaskKind::Loc;
        ft.options.epochs = 3;
        ft.options.init_new_head = true;
        c.finetune = ft;
        c.output_dir = "runs/finetune-loc";
    } else {
        throw std::invalid_argument("unknown preset '" + name + "'");
    }
    c.validate();
    return c;
}

}  // namespace fx
