#include "fx/checkpoint.hpp"

#include <algorithm>
#include <cstdio>

#include <json.hpp>

#include "fx/binary_io.hpp"
#include "fx/config.hpp"

namespace fx {
namespace {

using nlohmann::json;

std::vector<char> pack(const ParamStore& store) {
    std::vector<char> out;
    out.reserve(store.total_elements() * 8);
    for (const auto& p : store.all())
        for (double v : p.value.data()) binary::append_le(out, v);
    return out;
}

std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

json head_to_json(const HeadInfo& h) {
    return json{{"dataset", h.key.dataset},       {"task", to_string(h.key.task)}, {"subtask", h.key.subtask},
                {"component", to_string(h.component)}, {"num_classes", h.num_classes}, {"class_map", h.class_map}};
}

template <typename T>
T field(const json& j, const std::string& key, const std::string& where) {
    if (!j.is_object() || !j.contains(key)) throw CheckpointError("manifest " + where + ": missing '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw CheckpointError("manifest " + where + "." + key + ": " + e.what());
    }
}

Tensor read_tensor(std::span<const char> blob, const std::string& blob_name, std::size_t offset, const Shape& shape,
                   const std::string& where) {
    const std::size_t count = shape_numel(shape);
    if ((offset + count) * 8 > blob.size())
        throw CheckpointError("manifest " + where + ": elements [" + std::to_string(offset) + ", " + std::to_string(offset + count) +
                              ") at byte offset " + std::to_string(offset * 8) + " exceed " + blob_name + " (" +
                              std::to_string(blob.size()) + " bytes)");
    Tensor t(shape);
    for (std::size_t i = 0; i < count; ++i) t[i] = binary::read_le<double>(blob, (offset + i) * 8);
    return t;
}

}  // namespace

std::string to_string(WeightSet w) { return w == WeightSet::Student ? "student" : "teacher"; }

WeightSet parse_weight_set(const std::string& text) {
    if (text == "student") return WeightSet::Student;
    if (text == "teacher") return WeightSet::Teacher;
    throw std::invalid_argument("invalid weight set '" + text + "' (expected student or teacher)");
}

Checkpoint make_checkpoint(const FoundationModel& model, const TeacherState& teacher, const AdamW* optimizer,
                           const std::vector<SynthDatasetSpec>& datasets, std::size_t cycle, std::size_t epoch,
                           std::uint64_t config_hash) {
    Checkpoint c;
    c.arch = model.arch();
    c.heads = model.heads();
    c.datasets = datasets;
    for (const auto& p : model.params().all()) c.student.add_detached(p.name, p.value, p.component);
    c.teacher = teacher_weights(model, teacher);
    for (const auto& p : teacher.params.all()) c.teacher_mirrors.push_back(p.name);
    c.momentum = teacher.momentum;
    if (optimizer) c.optimizer = optimizer->states();
    c.cycle = cycle;
    c.epoch = epoch;
    c.config_hash = config_hash;
    return c;
}

Checkpoint export_teacher(const FoundationModel& model, const TeacherState& teacher, const std::vector<SynthDatasetSpec>& datasets,
                          std::size_t cycle, std::size_t epoch, std::uint64_t config_hash) {
    auto c = make_checkpoint(model, teacher, nullptr, datasets, cycle, epoch, config_hash);
    c.inference = WeightSet::Teacher;
    return c;
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& c) {
    std::filesystem::create_directories(dir);
    json params = json::array();
    std::size_t offset = 0;
    for (const auto& p : c.student.all()) {
        if (!c.teacher.contains(p.name) || c.teacher.at(p.name).value.shape() != p.value.shape())
            throw CheckpointError("teacher weight set does not match student parameter '" + p.name + "'");
        params.push_back(json{{"name", p.name}, {"component", to_string(p.component)}, {"shape", p.value.shape()}, {"offset", offset}});
        offset += p.value.numel();
    }
    ParamStore teacher_ordered;
    for (const auto& p : c.student.all()) teacher_ordered.add_detached(p.name, c.teacher.at(p.name).value, p.component);

    json opt = json::array();
    std::vector<char> opt_blob;
    std::size_t opt_offset = 0;
    for (const auto& [name, st] : c.optimizer) {
        opt.push_back(json{{"name", name}, {"step_count", st.step_count}, {"shape", st.m.shape()}, {"offset", opt_offset}});
        for (double v : st.m.data()) binary::append_le(opt_blob, v);
        for (double v : st.v.data()) binary::append_le(opt_blob, v);
        opt_offset += 2 * st.m.numel();
    }

    const auto census = count_params(c.student);
    json counts = json::object();
    for (const auto& [id, n] : census.per_component) counts[to_string(id)] = n;
    json heads = json::array();
    for (const auto& h : c.heads) heads.push_back(head_to_json(h));
    json datasets = json::array();
    for (const auto& d : c.datasets) datasets.push_back(dataset_spec_to_json(d));

    const auto student_blob = pack(c.student);
    const auto teacher_blob = pack(teacher_ordered);
    json manifest{{"format_version", kCheckpointFormatVersion},
                  {"arch", arch_to_json(c.arch)},
                  {"heads", heads},
                  {"datasets", datasets},
                  {"parameters", params},
                  {"teacher_mirrors", c.teacher_mirrors},
                  {"momentum", c.momentum},
                  {"optimizer", opt},
                  {"cycle", c.cycle},
                  {"epoch", c.epoch},
                  {"config_hash", hex64(c.config_hash)},
                  {"inference_weights", to_string(c.inference)},
                  {"component_counts", counts},
                  {"total_params", census.total},
                  {"blobs",
                   {{"student", {{"file", "student.bin"}, {"bytes", student_blob.size()}}},
                    {"teacher", {{"file", "teacher.bin"}, {"bytes", teacher_blob.size()}}},
                    {"optimizer", {{"file", "optimizer.bin"}, {"bytes", opt_blob.size()}}}}}};
    binary::write_file(dir / "student.bin", student_blob);
    binary::write_file(dir / "teacher.bin", teacher_blob);
    binary::write_file(dir / "optimizer.bin", opt_blob);
    const auto text = manifest.dump(2) + "\n";
    binary::write_file(dir / "manifest.json", text);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::vector<char> raw;
    try {
        raw = binary::read_file(dir / "manifest.json");
    } catch (const std::exception& e) {
        throw CheckpointError(e.what());
    }
    json m;
    try {
        m = json::parse(raw.begin(), raw.end());
    } catch (const json::parse_error& e) {
        throw CheckpointError("corrupt manifest " + (dir / "manifest.json").string() + " at byte offset " + std::to_string(e.byte) + ": " +
                              e.what());
    }
    const int version = field<int>(m, "format_version", "");
    if (version != kCheckpointFormatVersion)
        throw CheckpointError("manifest format_version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointFormatVersion) + ")");

    Checkpoint c;
    try {
        c.arch = arch_from_json(m.at("arch"), "arch");
        for (const auto& d : m.at("datasets")) c.datasets.push_back(dataset_spec_from_json(d, "datasets"));
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("manifest ") + e.what());
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("manifest: ") + e.what());
    }
    const auto heads = field<json>(m, "heads", "");
    for (std::size_t i = 0; i < heads.size(); ++i) {
        const auto where = "heads[" + std::to_string(i) + "]";
        HeadInfo h;
        h.key.dataset = field<std::string>(heads[i], "dataset", where);
        try {
            h.key.task = parse_task(field<std::string>(heads[i], "task", where));
            h.component = parse_component(field<std::string>(heads[i], "component", where));
        } catch (const std::invalid_argument& e) {
            throw CheckpointError("manifest " + where + ": " + e.what());
        }
        h.key.subtask = field<std::string>(heads[i], "subtask", where);
        h.num_classes = field<std::size_t>(heads[i], "num_classes", where);
        h.class_map = field<std::vector<std::size_t>>(heads[i], "class_map", where);
        c.heads.push_back(std::move(h));
    }

    auto blob = [&](const std::string& name) {
        try {
            auto b = binary::read_file(dir / name);
            const auto expected = field<std::size_t>(m.at("blobs").at(name.substr(0, name.find('.'))), "bytes", "blobs");
            if (b.size() != expected)
                throw CheckpointError(name + " holds " + std::to_string(b.size()) + " bytes but the manifest records " + std::to_string(expected));
            return b;
        } catch (const json::exception& e) {
            throw CheckpointError(std::string("manifest blobs: ") + e.what());
        } catch (const std::runtime_error& e) {
            throw CheckpointError(e.what());
        }
    };
    const auto student_blob = blob("student.bin");
    const auto teacher_blob = blob("teacher.bin");
    const auto opt_blob = blob("optimizer.bin");

    const auto params = field<json>(m, "parameters", "");
    std::size_t expected_offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto where = "parameters[" + std::to_string(i) + "]";
        const auto name = field<std::string>(params[i], "name", where);
        const auto shape = field<Shape>(params[i], "shape", where);
        const auto offset = field<std::size_t>(params[i], "offset", where);
        if (offset != expected_offset)
            throw CheckpointError("manifest " + where + " '" + name + "': offset " + std::to_string(offset) + " but previous entries end at " +
                                  std::to_string(expected_offset));
        ComponentId comp;
        try {
            comp = parse_component(field<std::string>(params[i], "component", where));
        } catch (const std::invalid_argument& e) {
            throw CheckpointError("manifest " + where + ": " + e.what());
        }
        c.student.add_detached(name, read_tensor(student_blob, "student.bin", offset, shape, where + " '" + name + "'"), comp);
        c.teacher.add_detached(name, read_tensor(teacher_blob, "teacher.bin", offset, shape, where + " '" + name + "'"), comp);
        expected_offset += shape_numel(shape);
    }
    if (expected_offset * 8 != student_blob.size())
        throw CheckpointError("student.bin has " + std::to_string(student_blob.size()) + " bytes but the manifest describes " +
                              std::to_string(expected_offset * 8));

    c.teacher_mirrors = field<std::vector<std::string>>(m, "teacher_mirrors", "");
    for (const auto& n : c.teacher_mirrors)
        if (!c.student.contains(n)) throw CheckpointError("manifest teacher_mirrors: unknown parameter '" + n + "'");
    c.momentum = field<double>(m, "momentum", "");

    const auto opt = field<json>(m, "optimizer", "");
    for (std::size_t i = 0; i < opt.size(); ++i) {
        const auto where = "optimizer[" + std::to_string(i) + "]";
        const auto name = field<std::string>(opt[i], "name", where);
        const auto shape = field<Shape>(opt[i], "shape", where);
        const auto offset = field<std::size_t>(opt[i], "offset", where);
        AdamWState st;
        st.step_count = field<std::uint64_t>(opt[i], "step_count", where);
        st.m = read_tensor(opt_blob, "optimizer.bin", offset, shape, where + " '" + name + "' m");
        st.v = read_tensor(opt_blob, "optimizer.bin", offset + shape_numel(shape), shape, where + " '" + name + "' v");
        c.optimizer.emplace(name, std::move(st));
    }
    c.cycle = field<std::size_t>(m, "cycle", "");
    c.epoch = field<std::size_t>(m, "epoch", "");
    const auto hash = field<std::string>(m, "config_hash", "");
    try {
        c.config_hash = std::stoull(hash, nullptr, 16);
    } catch (const std::exception&) {
        throw CheckpointError("manifest config_hash: not a hexadecimal number: '" + hash + "'");
    }
    try {
        c.inference = parse_weight_set(field<std::string>(m, "inference_weights", ""));
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("manifest inference_weights: ") + e.what());
    }

    const auto census = count_params(c.student);
    if (field<std::size_t>(m, "total_params", "") != census.total)
        throw CheckpointError("manifest total_params disagrees with the parameter table (" + std::to_string(census.total) + ")");
    return c;
}

FoundationModel model_from_checkpoint(const Checkpoint& c, std::optional<WeightSet> weights) {
    auto model = FoundationModel::from_layout(c.arch, c.heads);
    const auto& src = weights.value_or(c.inference) == WeightSet::Teacher ? c.teacher : c.student;
    if (model.params().size() != src.size())
        throw CheckpointError("checkpoint has " + std::to_string(src.size()) + " parameters but its head layout implies " +
                              std::to_string(model.params().size()));
    for (auto& p : model.params().all()) {
        if (!src.contains(p.name)) throw CheckpointError("checkpoint lacks parameter '" + p.name + "'");
        const auto& v = src.at(p.name);
        if (v.value.shape() != p.value.shape() || v.component != p.component)
            throw CheckpointError("checkpoint parameter '" + p.name + "' has shape " + shape_to_string(v.value.shape()) + ", expected " +
                                  shape_to_string(p.value.shape()));
        p.value = v.value;
    }
    return model;
}

TeacherState teacher_from_checkpoint(const Checkpoint& c) {
    TeacherState t;
    t.momentum = c.momentum;
    for (const auto& name : c.teacher_mirrors) {
        const auto& p = c.teacher.at(name);
        t.params.add_detached(p.name, p.value, p.component);
    }
    return t;
}

AdamW optimizer_from_checkpoint(const Checkpoint& c, const AdamWHyper& hyper) {
    AdamW opt(hyper);
    opt.states() = c.optimizer;
    return opt;
}

}  // namespace fx
