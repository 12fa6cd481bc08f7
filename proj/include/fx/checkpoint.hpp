#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fx/adamw.hpp"
#include "fx/engine.hpp"
#include "fx/model.hpp"

namespace fx {

inline constexpr int kCheckpointFormatVersion = 1;

/// Unreadable or inconsistent checkpoint; the message names the manifest
/// field and the byte or element offset involved.
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class WeightSet { Student, Teacher };
std::string to_string(WeightSet w);
WeightSet parse_weight_set(const std::string& text);

/// Directory layout: manifest.json, student.bin, teacher.bin, optimizer.bin.
/// Blobs are raw little-endian doubles; the manifest records names, shapes,
/// components and element offsets. teacher.bin always holds a full weight set
/// (student values where the teacher mirrors nothing).
struct Checkpoint {
    ArchConfig arch;
    std::vector<HeadInfo> heads;
    std::vector<SynthDatasetSpec> datasets;
    ParamStore student;
    ParamStore teacher;
    std::vector<std::string> teacher_mirrors;
    double momentum = 0.80;
    std::map<std::string, AdamWState> optimizer;
    std::size_t cycle = 0;
    std::size_t epoch = 0;
    std::uint64_t config_hash = 0;
    WeightSet inference = WeightSet::Student;
};

Checkpoint make_checkpoint(const FoundationModel& model, const TeacherState& teacher, const AdamW* optimizer,
                           const std::vector<SynthDatasetSpec>& datasets, std::size_t cycle, std::size_t epoch,
                           std::uint64_t config_hash);
/// Same content with the teacher weights selected for inference.
Checkpoint export_teacher(const FoundationModel& model, const TeacherState& teacher, const std::vector<SynthDatasetSpec>& datasets,
                          std::size_t cycle, std::size_t epoch, std::uint64_t config_hash);

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Model carrying the chosen weight set (default: the checkpoint's inference choice).
FoundationModel model_from_checkpoint(const Checkpoint& ckpt, std::optional<WeightSet> weights = std::nullopt);
TeacherState teacher_from_checkpoint(const Checkpoint& ckpt);
AdamW optimizer_from_checkpoint(const Checkpoint& ckpt, const AdamWHyper& hyper);

}  // namespace fx
