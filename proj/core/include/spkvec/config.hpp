#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "spkvec/train.hpp"

namespace spkvec {

// Serialized union of the training configuration and run paths. The file
// format is flat "key = value" lines with dotted section names; '#' starts a
// comment. Unknown keys are errors, not warnings.
struct RunConfig {
    TrainConfig train;
    std::string corpus_dir;
    std::string trials_path;       // validation trial list
    std::string test_trials_path;  // optional held-out list
    std::string out_dir;
};

// Canonical text form: fixed key order, full double precision. Serializing
// then parsing reproduces the config exactly.
std::string serialize_config(const RunConfig& cfg);

RunConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config_file(const std::filesystem::path& path);

// Every validation problem at once (domain checks across all sections).
std::vector<std::string> config_problems(const RunConfig& cfg);

// Keys whose serialized values differ; the ablation plumbing check.
std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b);

}  // namespace spkvec
