#pragma once

// Flat dotted-key experiment configuration. Resolution order:
// built-in defaults < JSON file < PLM_* environment < explicit overrides.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace plm {

struct ConfigKey {
    std::string name;
    nlohmann::json default_value;
    std::string help;
};

// Every accepted key with its default; the default's JSON type fixes the
// key's type.
const std::vector<ConfigKey>& config_keys();

// "trainer.batch_size" -> "PLM_TRAINER_BATCH_SIZE"
std::string env_name(const std::string& key);

class Config {
public:
    Config();  // defaults

    // Merges a JSON object of flat keys. Unknown keys and wrong types throw ConfigError.
    void merge_json(const nlohmann::json& object, const std::string& origin);
    void merge_file(const std::string& path);
    // Reads PLM_* variables; a PLM_ variable that names no key throws.
    void merge_env(char** environ_block);
    // String form as given on a command line or in the environment.
    void set(const std::string& key, const std::string& text, const std::string& origin = "command line");
    void set_value(const std::string& key, const nlohmann::json& value, const std::string& origin = "override");

    bool has(const std::string& key) const;
    const nlohmann::json& get(const std::string& key) const;
    std::string str(const std::string& key) const;
    std::int64_t integer(const std::string& key) const;
    std::size_t size(const std::string& key) const;  // non-negative integer
    std::uint64_t u64(const std::string& key) const;
    double real(const std::string& key) const;
    bool flag(const std::string& key) const;
    std::vector<std::size_t> sizes(const std::string& key) const;
    std::vector<double> reals(const std::string& key) const;
    std::vector<std::string> strings(const std::string& key) const;

    const nlohmann::json& values() const { return values_; }
    std::string dump() const { return values_.dump(2) + "\n"; }

private:
    nlohmann::json values_;
};

}  // namespace plm
