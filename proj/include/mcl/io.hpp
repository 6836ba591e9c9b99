#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mcl/confounder.hpp"
#include "mcl/meta.hpp"
#include "mcl/model.hpp"
#include "mcl/tensor.hpp"

namespace mcl {

inline constexpr const char* kCodeVersion = "metalab 1.0";
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

struct Checkpoint {
    ModelBundle bundle;
    std::uint64_t config_hash = 0;
};

// Versioned little-endian binary container: magic "MCLCKPT\n", format
// version, mode tag, config hash, the bundle's layer structure, then every
// parameter as (name, shape, raw 64-bit values). Loading rejects wrong magic,
// versions other than the current one (naming expected and actual), and any
// truncation or length-field inconsistency. Round-trips are value-identical,
// and saving a loaded checkpoint reproduces the file byte for byte. Hash
// agreement with the current config is the caller's concern.
void save_checkpoint(const ModelBundle& b, std::uint64_t config_hash, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Comma-separated metrics table, header
//   iteration,split,pred-loss,score,l-dm-xi,l-dm-fgr,seconds
// and one line per row, doubles printed with 17 significant digits so the
// parse-back is bit-exact.
void emit_metrics(const std::vector<MetricsRow>& rows, const std::string& path);
std::vector<MetricsRow> parse_metrics(const std::string& path);

// What a finished run leaves behind. config_text is the canonical dump, so
// the manifest alone reproduces the run; outputs lists every file the run
// wrote, the manifest itself included. Written last: its presence marks a
// completed run.
struct RunManifest {
    std::string subcommand;
    std::string config_text;
    std::uint64_t seed = 0;
    std::string code_version = kCodeVersion;
    std::string started, finished;  // UTC, ISO-8601
    std::vector<std::string> outputs;
};
std::string utc_timestamp();
void write_manifest(const RunManifest& m, const std::string& path);

// Structured report serializations with stable key order (JSON text).
std::string to_json_text(const EvalReport& r);
std::string to_json_text(const std::vector<Theorem1Report>& reports);
std::string to_json_text(const SweepReport& r);

// |xi^T xi| as an n_k x n_k comma-separated matrix, 17 significant digits.
void write_gram_csv(const Tensor& xi, const std::string& path);

}  // namespace mcl
