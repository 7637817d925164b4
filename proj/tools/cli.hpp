#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace matekd::cli {

// Every key the config file may set, with its default value.
nlohmann::json default_config();

// Overlays `file` onto `base`. Keys absent from `base` are config errors.
nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& file);

// Applies "a.b.c=value" overrides. Values are parsed as JSON unless the
// target is a string. Throws ConfigError on unknown keys, type mismatches
// and on the same key given twice with different values.
nlohmann::json apply_overrides(nlohmann::json config, const std::vector<std::string>& overrides);

// Full command-line entry point; returns the process exit code.
int run(int argc, char** argv);

}  // namespace matekd::cli
