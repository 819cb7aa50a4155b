// SPDX-License-Identifier: Apache-2.0
#include "metis/report_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace metis {

namespace {

constexpr char kMatrixMagic[12] = {'M', 'E', 'T', 'I', 'S', '-', 'M', 'A', 'T', 'R', 'I', 'X'};
constexpr char kQtMagic[12] = {'M', 'E', 'T', 'I', 'S', '-', 'Q', 'B', 'L', 'O', 'C', 'K'};
constexpr char kCkptMagic[12] = {'M', 'E', 'T', 'I', 'S', '-', 'W', 'E', 'I', 'G', 'H', 'T'};
constexpr uint32_t kBinaryVersion = 1;

// All binary IO is explicitly little-endian regardless of host order.
template <typename T>
void put_le(std::string& out, T v) {
    auto u = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(u.begin(), u.end());
    out.append(reinterpret_cast<const char*>(u.data()), sizeof(T));
}

class ByteReader {
  public:
    ByteReader(const std::string& bytes, const std::string& what)
        : bytes_(bytes), what_(what) {}

    template <typename T>
    T get_le() {
        if (pos_ + sizeof(T) > bytes_.size())
            throw std::runtime_error(what_ + ": truncated file");
        std::array<unsigned char, sizeof(T)> u;
        std::memcpy(u.data(), bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        if constexpr (std::endian::native == std::endian::big)
            std::reverse(u.begin(), u.end());
        return std::bit_cast<T>(u);
    }

    void expect_magic(const char (&magic)[12]) {
        if (pos_ + 12 > bytes_.size()) throw std::runtime_error(what_ + ": truncated file");
        if (std::memcmp(bytes_.data() + pos_, magic, 12) != 0)
            throw std::runtime_error(what_ + ": magic mismatch");
        pos_ += 12;
    }

    void expect_version() {
        const uint32_t v = get_le<uint32_t>();
        if (v != kBinaryVersion)
            throw std::runtime_error(what_ + ": unknown version " + std::to_string(v));
    }

    void expect_end() {
        if (pos_ != bytes_.size())
            throw std::runtime_error(what_ + ": trailing bytes");
    }

  private:
    const std::string& bytes_;
    std::string what_;
    size_t pos_ = 0;
};

void append_matrix_block(std::string& out, const DenseMatrix& m) {
    put_le<uint64_t>(out, static_cast<uint64_t>(m.rows()));
    put_le<uint64_t>(out, static_cast<uint64_t>(m.cols()));
    put_le<uint8_t>(out, static_cast<uint8_t>(m.format_tag()));
    for (double v : m.data()) put_le<double>(out, v);
}

DenseMatrix read_matrix_block(ByteReader& r) {
    const uint64_t rows = r.get_le<uint64_t>();
    const uint64_t cols = r.get_le<uint64_t>();
    const uint8_t tag = r.get_le<uint8_t>();
    if (tag > 3) throw std::runtime_error("read_matrix: unknown format tag");
    if (rows > (1u << 26) || cols > (1u << 26))
        throw std::runtime_error("read_matrix: implausible dimensions");
    DenseMatrix m(static_cast<Index>(rows), static_cast<Index>(cols),
                  static_cast<Format>(tag));
    for (double& v : m.data()) v = r.get_le<double>();
    return m;
}

} // namespace

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_matrix(const std::string& path, const DenseMatrix& m) {
    std::string out;
    out.append(kMatrixMagic, 12);
    put_le<uint32_t>(out, kBinaryVersion);
    append_matrix_block(out, m);
    write_text_file(path, out);
}

DenseMatrix read_matrix(const std::string& path) {
    const std::string bytes = read_text_file(path);
    ByteReader r(bytes, "read_matrix");
    r.expect_magic(kMatrixMagic);
    r.expect_version();
    DenseMatrix m = read_matrix_block(r);
    r.expect_end();
    return m;
}

void write_matrix_csv(const std::string& path, const DenseMatrix& m) {
    std::string out;
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            if (j) out += ',';
            out += format_double_17(m(i, j));
        }
        out += '\n';
    }
    write_text_file(path, out);
}

DenseMatrix read_matrix_csv(const std::string& path) {
    const std::string bytes = read_text_file(path);
    std::vector<std::vector<double>> rows;
    std::istringstream ss(bytes);
    std::string line;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            size_t used = 0;
            row.push_back(std::stod(cell, &used));
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw std::runtime_error("read_matrix_csv: ragged rows in " + path);
        rows.push_back(std::move(row));
    }
    DenseMatrix m(static_cast<Index>(rows.size()),
                  rows.empty() ? 0 : static_cast<Index>(rows.front().size()));
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < rows[i].size(); ++j)
            m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    return m;
}

void write_qtensor(const std::string& path, const QuantizedBlockTensor& q) {
    std::string out;
    out.append(kQtMagic, 12);
    put_le<uint32_t>(out, kBinaryVersion);
    put_le<uint64_t>(out, static_cast<uint64_t>(q.rows));
    put_le<uint64_t>(out, static_cast<uint64_t>(q.cols));
    put_le<uint32_t>(out, static_cast<uint32_t>(q.block_size));
    put_le<uint8_t>(out, static_cast<uint8_t>(q.mode));
    for (double s : q.scales) put_le<uint8_t>(out, e4m3_encode(s));
    // Two fp4 codes per byte, low nibble is the even index; odd tail pads
    // its high nibble with zero.
    for (size_t i = 0; i < q.codes.size(); i += 2) {
        uint8_t byte = e2m1_encode(q.codes[i]);
        if (i + 1 < q.codes.size())
            byte = static_cast<uint8_t>(byte | (e2m1_encode(q.codes[i + 1]) << 4));
        put_le<uint8_t>(out, byte);
    }
    write_text_file(path, out);
}

QuantizedBlockTensor read_qtensor(const std::string& path) {
    const std::string bytes = read_text_file(path);
    ByteReader r(bytes, "read_qtensor");
    r.expect_magic(kQtMagic);
    r.expect_version();
    QuantizedBlockTensor q;
    q.rows = static_cast<Index>(r.get_le<uint64_t>());
    q.cols = static_cast<Index>(r.get_le<uint64_t>());
    const uint32_t bs = r.get_le<uint32_t>();
    if (bs == 0 || bs > (1u << 20)) throw std::runtime_error("read_qtensor: bad block size");
    q.block_size = static_cast<int>(bs);
    const uint8_t mode = r.get_le<uint8_t>();
    if (mode > 2) throw std::runtime_error("read_qtensor: unknown rounding mode");
    q.mode = static_cast<Rounding>(mode);
    q.scales.resize(static_cast<size_t>(q.rows * q.blocks_per_row()));
    for (double& s : q.scales) s = e4m3_decode(r.get_le<uint8_t>());
    q.codes.resize(static_cast<size_t>(q.rows) * static_cast<size_t>(q.cols));
    for (size_t i = 0; i < q.codes.size(); i += 2) {
        const uint8_t byte = r.get_le<uint8_t>();
        q.codes[i] = e2m1_decode(byte & 0xf);
        if (i + 1 < q.codes.size()) q.codes[i + 1] = e2m1_decode(byte >> 4);
    }
    r.expect_end();
    return q;
}

void write_checkpoint(const std::string& path, const WeightCheckpoint& ckpt) {
    std::string out;
    out.append(kCkptMagic, 12);
    put_le<uint32_t>(out, kBinaryVersion);
    put_le<uint64_t>(out, static_cast<uint64_t>(ckpt.weight.rank()));
    put_le<uint64_t>(out, ckpt.seed);
    put_le<uint64_t>(out, ckpt.step);
    append_matrix_block(out, ckpt.weight.u);
    for (double s : ckpt.weight.s) put_le<double>(out, s);
    append_matrix_block(out, ckpt.weight.v);
    append_matrix_block(out, ckpt.weight.residual);
    write_text_file(path, out);
}

WeightCheckpoint read_checkpoint(const std::string& path) {
    const std::string bytes = read_text_file(path);
    ByteReader r(bytes, "read_checkpoint");
    r.expect_magic(kCkptMagic);
    r.expect_version();
    WeightCheckpoint c;
    const uint64_t k = r.get_le<uint64_t>();
    c.seed = r.get_le<uint64_t>();
    c.step = r.get_le<uint64_t>();
    c.weight.u = read_matrix_block(r);
    c.weight.s.resize(k);
    for (double& s : c.weight.s) s = r.get_le<double>();
    c.weight.v = read_matrix_block(r);
    c.weight.residual = read_matrix_block(r);
    r.expect_end();
    if (c.weight.u.cols() != static_cast<Index>(k) ||
        c.weight.v.cols() != static_cast<Index>(k) ||
        c.weight.u.rows() != c.weight.residual.rows() ||
        c.weight.v.rows() != c.weight.residual.cols())
        throw std::runtime_error("read_checkpoint: inconsistent shapes");
    return c;
}

std::string format_double_17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

JsonWriter& JsonWriter::begin_object() {
    prepare_value();
    out_ += '{';
    stack_.push_back('{');
    has_items_.push_back(false);
    return *this;
}

JsonWriter& JsonWriter::end_object() {
    out_ += '}';
    stack_.pop_back();
    has_items_.pop_back();
    if (!path_.empty()) path_.pop_back();
    return *this;
}

JsonWriter& JsonWriter::begin_array(const std::string& k) {
    if (!k.empty()) key(k);
    prepare_value();
    out_ += '[';
    stack_.push_back('[');
    has_items_.push_back(false);
    return *this;
}

JsonWriter& JsonWriter::end_array() {
    out_ += ']';
    stack_.pop_back();
    has_items_.pop_back();
    if (!path_.empty()) path_.pop_back();
    return *this;
}

JsonWriter& JsonWriter::key(const std::string& k) {
    if (has_items_.back()) out_ += ',';
    has_items_.back() = true;
    out_ += '"';
    out_ += k;  // keys are plain identifiers in every schema here
    out_ += "\":";
    pending_key_ = k;
    key_armed_ = true;
    return *this;
}

void JsonWriter::prepare_value() {
    if (key_armed_) {
        path_.push_back(pending_key_);
        key_armed_ = false;
        return;
    }
    if (!stack_.empty() && stack_.back() == '[') {
        if (has_items_.back()) out_ += ',';
        has_items_.back() = true;
    }
    path_.push_back("[]");
}

JsonWriter& JsonWriter::value(double v) {
    prepare_value();
    if (!std::isfinite(v)) {
        std::string where;
        for (const auto& p : path_) where += "/" + p;
        throw std::runtime_error("emit_report: non-finite value at field " + where);
    }
    out_ += format_double_17(v);
    path_.pop_back();
    return *this;
}

JsonWriter& JsonWriter::value(const std::string& v) {
    prepare_value();
    out_ += '"';
    for (char c : v) {
        switch (c) {
            case '"': out_ += "\\\""; break;
            case '\\': out_ += "\\\\"; break;
            case '\n': out_ += "\\n"; break;
            case '\t': out_ += "\\t"; break;
            case '\r': out_ += "\\r"; break;
            default:
                if (static_cast<unsigned char>(c) < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\u%04x", c);
                    out_ += buf;
                } else {
                    out_ += c;
                }
        }
    }
    out_ += '"';
    path_.pop_back();
    return *this;
}

JsonWriter& JsonWriter::value(const char* v) { return value(std::string(v)); }

JsonWriter& JsonWriter::value(bool v) {
    prepare_value();
    out_ += v ? "true" : "false";
    path_.pop_back();
    return *this;
}

JsonWriter& JsonWriter::value(uint64_t v) {
    prepare_value();
    out_ += std::to_string(v);
    path_.pop_back();
    return *this;
}

JsonWriter& JsonWriter::value(int64_t v) {
    prepare_value();
    out_ += std::to_string(v);
    path_.pop_back();
    return *this;
}

JsonWriter& JsonWriter::number_array(const std::string& k, std::span<const double> vs) {
    begin_array(k);
    for (double v : vs) value(v);
    return end_array();
}

std::string JsonWriter::str() const {
    if (!stack_.empty()) throw std::runtime_error("JsonWriter: unbalanced structure");
    return out_;
}

std::string fnv1a_hex(const std::string& bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string envelope_json(const std::string& kind, const std::string& config_hash,
                          const std::string& payload_json) {
    std::string ts = "1970-01-01T00:00:00Z";
    const std::time_t now = std::time(nullptr);
    std::tm tm_utc{};
    if (gmtime_r(&now, &tm_utc) != nullptr) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02dZ",
                      tm_utc.tm_year + 1900, tm_utc.tm_mon + 1, tm_utc.tm_mday,
                      tm_utc.tm_hour, tm_utc.tm_min, tm_utc.tm_sec);
        ts = buf;
    }
    JsonWriter w;
    w.begin_object()
        .field("schema_version", static_cast<uint64_t>(kSchemaVersion))
        .field("tool_version", kToolVersion)
        .field("timestamp", ts)
        .field("config_hash", config_hash)
        .field("kind", kind)
        .end_object();
    const std::string head = w.str();
    // Splice the pre-serialized payload in as the last field.
    return head.substr(0, head.size() - 1) + ",\"payload\":" + payload_json + "}";
}

std::string csv_series(const std::vector<std::string>& columns,
                       const std::vector<std::vector<double>>& data) {
    require(columns.size() == data.size(), "csv_series: column count mismatch");
    std::string out;
    for (size_t c = 0; c < columns.size(); ++c) {
        if (c) out += ',';
        out += columns[c];
    }
    out += '\n';
    const size_t n = data.empty() ? 0 : data.front().size();
    for (const auto& col : data)
        require(col.size() == n, "csv_series: ragged columns");
    for (size_t i = 0; i < n; ++i) {
        for (size_t c = 0; c < data.size(); ++c) {
            if (!std::isfinite(data[c][i]))
                throw std::runtime_error("csv_series: non-finite value in column " +
                                         columns[c]);
            if (c) out += ',';
            out += format_double_17(data[c][i]);
        }
        out += '\n';
    }
    return out;
}

} // namespace metis
