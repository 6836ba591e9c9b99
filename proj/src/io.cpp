#include "mcl/io.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mcl/causal.hpp"
#include "mcl/config.hpp"

namespace mcl {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr char kMagic[8] = {'M', 'C', 'L', 'C', 'K', 'P', 'T', '\n'};
constexpr std::size_t kMaxNameLen = 4096;
constexpr std::size_t kMaxRank = 8;
constexpr std::size_t kMaxValues = std::size_t{1} << 30;

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// The container is little-endian; the lab targets little-endian hosts.
struct ByteWriter {
    std::string out;
    void u8(std::uint8_t v) { out.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
    void u64(std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }
    void bytes(const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); }
};

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) {
        if (buf.size() - pos < n)
            throw std::runtime_error(std::string("checkpoint truncated in ") + what);
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
};

Activation activation_from_tag(std::uint8_t tag) {
    if (tag > static_cast<std::uint8_t>(Activation::softplus))
        throw std::runtime_error("checkpoint carries an unknown activation tag " +
                                 std::to_string(tag));
    return static_cast<Activation>(tag);
}

void write_spec(ByteWriter& w, const MLPSpec& spec) {
    w.u32(static_cast<std::uint32_t>(spec.widths.size()));
    for (std::size_t width : spec.widths) w.u64(width);
}

std::vector<std::size_t> read_widths(ByteReader& r, const char* what) {
    const std::uint32_t count = r.u32(what);
    if (count > 64) throw std::runtime_error(std::string("implausible width count in ") + what);
    std::vector<std::size_t> widths(count);
    for (auto& width : widths) width = r.u64(what);
    return widths;
}

const char* kMetricsHeader = "iteration,split,pred-loss,score,l-dm-xi,l-dm-fgr,seconds";

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            fields.push_back(line.substr(start));
            return fields;
        }
        fields.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

double parse_double_field(const std::string& s, const char* what) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || s.empty())
        throw std::runtime_error(std::string("metrics: malformed ") + what + " field '" + s + "'");
    return v;
}

ordered_json eval_json(const EvalReport& r) {
    ordered_json j;
    j["task_count"] = r.task_count;
    j["mean_loss"] = r.mean_loss;
    j["half_width_loss"] = r.half_width_loss;
    j["mean_score"] = r.mean_score;
    j["half_width_score"] = r.half_width_score;
    j["per_task_loss"] = r.per_task_loss;
    j["per_task_score"] = r.per_task_score;
    return j;
}

}  // namespace

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    if (in.bad()) throw std::runtime_error("failed while reading " + path);
    return std::move(buf).str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.flush();
    if (!out) throw std::runtime_error("failed while writing " + path);
}

void save_checkpoint(const ModelBundle& b, std::uint64_t config_hash, const std::string& path) {
    ByteWriter w;
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kCheckpointVersion);
    w.u8(static_cast<std::uint8_t>(b.mode));
    w.u8(static_cast<std::uint8_t>(b.encoder.hidden));
    w.u8(static_cast<std::uint8_t>(b.encoder.output));
    w.u8(static_cast<std::uint8_t>(b.head.hidden));
    w.u8(static_cast<std::uint8_t>(b.head.output));
    w.u8(static_cast<std::uint8_t>(b.grouping.hidden));
    w.u8(static_cast<std::uint8_t>(b.grouping.output));
    w.u8(0);
    w.u64(b.n_k);
    w.u64(config_hash);
    write_spec(w, b.encoder);
    write_spec(w, b.head);
    write_spec(w, b.grouping);
    w.u32(static_cast<std::uint32_t>(b.params.size()));
    for (const auto& [name, t] : b.params) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.u32(static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t dim : t.shape) w.u64(dim);
        w.u64(t.size());
        w.bytes(t.vals().data(), t.size() * sizeof(double));
    }
    write_text_file(path, w.out);
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::string buf = read_text_file(path);
    ByteReader r{buf};

    r.need(sizeof kMagic, "magic");
    if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
        throw std::runtime_error(path + " is not a checkpoint file");
    r.pos = sizeof kMagic;
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));

    const std::uint8_t mode_tag = r.u8("mode");
    if (mode_tag > 1)
        throw std::runtime_error("checkpoint carries an unknown mode tag " +
                                 std::to_string(mode_tag));

    Checkpoint ckpt;
    ModelBundle& b = ckpt.bundle;
    b.mode = static_cast<Mode>(mode_tag);
    b.encoder.hidden = activation_from_tag(r.u8("encoder activation"));
    b.encoder.output = activation_from_tag(r.u8("encoder activation"));
    b.head.hidden = activation_from_tag(r.u8("head activation"));
    b.head.output = activation_from_tag(r.u8("head activation"));
    b.grouping.hidden = activation_from_tag(r.u8("grouping activation"));
    b.grouping.output = activation_from_tag(r.u8("grouping activation"));
    r.u8("padding");
    b.n_k = r.u64("n_k");
    ckpt.config_hash = r.u64("config hash");
    b.encoder.widths = read_widths(r, "encoder widths");
    b.head.widths = read_widths(r, "head widths");
    b.grouping.widths = read_widths(r, "grouping widths");

    const std::uint32_t param_count = r.u32("parameter count");
    if (param_count > 4096) throw std::runtime_error("implausible parameter count");
    for (std::uint32_t p = 0; p < param_count; ++p) {
        const std::uint32_t name_len = r.u32("parameter name length");
        if (name_len > kMaxNameLen)
            throw std::runtime_error("parameter name length field is implausible");
        r.need(name_len, "parameter name");
        const std::string name(buf.data() + r.pos, name_len);
        r.pos += name_len;

        const std::uint32_t rank = r.u32("parameter rank");
        if (rank > kMaxRank) throw std::runtime_error("parameter rank field is implausible");
        Shape shape(rank);
        std::size_t expected = 1;
        for (auto& dim : shape) {
            dim = r.u64("parameter shape");
            if (dim == 0 || dim > kMaxValues)
                throw std::runtime_error("parameter dimension field is implausible");
            expected *= dim;
            if (expected > kMaxValues)
                throw std::runtime_error("parameter dimension field is implausible");
        }
        const std::uint64_t count = r.u64("parameter length");
        if (count != expected)
            throw std::runtime_error("parameter length field does not match the shape of " + name);
        r.need(count * sizeof(double), "parameter values");
        std::vector<double> values(count);
        std::memcpy(values.data(), buf.data() + r.pos, count * sizeof(double));
        r.pos += count * sizeof(double);
        b.params.set(name, tensor(std::move(shape), std::move(values)));
    }
    if (r.pos != buf.size())
        throw std::runtime_error("trailing bytes after the last parameter");
    return ckpt;
}

void emit_metrics(const std::vector<MetricsRow>& rows, const std::string& path) {
    std::string out = std::string(kMetricsHeader) + "\n";
    for (const MetricsRow& row : rows) {
        if (row.split.find(',') != std::string::npos || row.split.find('\n') != std::string::npos)
            throw std::invalid_argument("metrics: split must not contain separators");
        out += std::to_string(row.iteration);
        out += ',';
        out += row.split;
        out += ',';
        out += fmt_double(row.pred_loss);
        out += ',';
        out += fmt_double(row.score);
        out += ',';
        out += fmt_double(row.l_dm_xi);
        out += ',';
        out += fmt_double(row.l_dm_fgr);
        out += ',';
        out += fmt_double(row.seconds);
        out += '\n';
    }
    write_text_file(path, out);
}

std::vector<MetricsRow> parse_metrics(const std::string& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader)
        throw std::runtime_error("metrics: unexpected header in " + path);
    std::vector<MetricsRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const std::vector<std::string> f = split_fields(line);
        if (f.size() != 7)
            throw std::runtime_error("metrics: expected 7 fields, got " +
                                     std::to_string(f.size()));
        MetricsRow row;
        row.iteration = static_cast<std::size_t>(std::stoull(f[0]));
        row.split = f[1];
        row.pred_loss = parse_double_field(f[2], "pred-loss");
        row.score = parse_double_field(f[3], "score");
        row.l_dm_xi = parse_double_field(f[4], "l-dm-xi");
        row.l_dm_fgr = parse_double_field(f[5], "l-dm-fgr");
        row.seconds = parse_double_field(f[6], "seconds");
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string utc_timestamp() {
    const std::time_t now =
        std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_manifest(const RunManifest& m, const std::string& path) {
    ordered_json j;
    j["subcommand"] = m.subcommand;
    j["seed"] = m.seed;
    j["code_version"] = m.code_version;
    j["started"] = m.started;
    j["finished"] = m.finished;
    j["outputs"] = m.outputs;
    j["config"] = m.config_text;
    write_text_file(path, j.dump(2) + "\n");
}

std::string to_json_text(const EvalReport& r) { return eval_json(r).dump(2) + "\n"; }

std::string to_json_text(const std::vector<Theorem1Report>& reports) {
    ordered_json arr = ordered_json::array();
    for (const Theorem1Report& r : reports) {
        ordered_json j;
        j["setting"] = r.setting();
        j["q"] = r.q;
        j["n"] = r.n;
        j["population"] = r.population;
        j["w_causal"] = r.w_causal;
        j["w_noncausal"] = r.w_noncausal;
        j["noncausal_norm"] = r.noncausal_norm;
        j["noncausal_zero"] = r.noncausal_zero;
        arr.push_back(std::move(j));
    }
    return arr.dump(2) + "\n";
}

std::string to_json_text(const SweepReport& r) {
    ordered_json j;
    j["cells"] = ordered_json::array();
    for (const SweepCell& c : r.cells) {
        ordered_json cell;
        cell["mode"] = to_string(c.mode);
        cell["batch_size"] = c.batch_size;
        cell["seed"] = c.seed;
        cell["heldin_accuracy"] = c.heldin_accuracy;
        cell["heldin_half_width"] = c.heldin_half_width;
        cell["heldout_accuracy"] = c.heldout_accuracy;
        cell["heldout_half_width"] = c.heldout_half_width;
        j["cells"].push_back(std::move(cell));
    }
    j["aggregates"] = ordered_json::array();
    for (const SweepAggregate& a : r.aggregates) {
        ordered_json agg;
        agg["mode"] = to_string(a.mode);
        agg["batch_size"] = a.batch_size;
        agg["seeds"] = a.seeds;
        agg["heldin_mean"] = a.heldin_mean;
        agg["heldin_half_width"] = a.heldin_half_width;
        agg["heldout_mean"] = a.heldout_mean;
        agg["heldout_half_width"] = a.heldout_half_width;
        j["aggregates"].push_back(std::move(agg));
    }
    return j.dump(2) + "\n";
}

void write_gram_csv(const Tensor& xi, const std::string& path) {
    if (xi.shape.size() != 2) throw std::invalid_argument("gram export: xi must be 2-d");
    const std::size_t n_k = xi.shape[1];
    const std::vector<double> gram = gram_abs(xi);
    std::string out;
    for (std::size_t r = 0; r < n_k; ++r) {
        for (std::size_t c = 0; c < n_k; ++c) {
            if (c > 0) out += ',';
            out += fmt_double(gram[r * n_k + c]);
        }
        out += '\n';
    }
    write_text_file(path, out);
}

}  // namespace mcl
