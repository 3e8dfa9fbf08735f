#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "calibseg/synthdata.hpp"
#include "calibseg/trainer.hpp"

namespace calibseg {

// Flat key=value configuration. A [section] line prefixes the keys that
// follow it as "section.key"; set() with a full key always wins, which is how
// command-line overrides are applied. Lookup keeps the last value written.
class Config {
public:
    void set(const std::string& key, std::string value);
    bool has(const std::string& key) const;
    const std::string& require(const std::string& key) const;
    std::string get(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    const std::vector<std::pair<std::string, std::string>>& entries() const { return kv_; }

private:
    const std::string* find(const std::string& key) const;

    std::vector<std::pair<std::string, std::string>> kv_;
};

Config parse_config(const std::string& text);
Config load_config(const std::filesystem::path& path);

// Sorted key=value lines; the basis for hashing and provenance dumps.
std::string canonical_text(const Config& cfg);
std::uint64_t config_hash(const Config& cfg);

// Typed bindings. Keys inside the sections each binding consumes must be
// spelled correctly; unknown ones are rejected. Other sections are ignored,
// so one file can drive several subcommands.
TrainConfig make_train_config(const Config& cfg);
SceneSpec make_scene_spec(const Config& cfg);
DatasetCounts make_dataset_counts(const Config& cfg);

// Inverse direction: every effective setting written back out, so a resolved
// dump reproduces the run when fed through the matching make_*.
Config to_config(const TrainConfig& tc);
Config to_config(const SceneSpec& spec, const DatasetCounts& n, std::uint64_t seed);

} // namespace calibseg
