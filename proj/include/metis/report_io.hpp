// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metis/engine.hpp"
#include "metis/fp4_quant.hpp"
#include "metis/precision.hpp"

namespace metis {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr uint32_t kSchemaVersion = 1;

// Binary matrix container: 12-byte magic "METIS-MATRIX", u32 version, then
// u64 rows, u64 cols, u8 format tag, row-major f64 payload. Everything
// little-endian; roundtrips are bit-exact including negative zero and the
// format tag. A 0x0 matrix is a valid empty payload.
void write_matrix(const std::string& path, const DenseMatrix& m);
DenseMatrix read_matrix(const std::string& path);

// Plain CSV for small matrices, full 17-significant-digit values.
void write_matrix_csv(const std::string& path, const DenseMatrix& m);
DenseMatrix read_matrix_csv(const std::string& path);

// Quantized tensor container: magic "METIS-QBLOCK", u32 version, u64 rows,
// u64 cols, u32 block size, u8 rounding mode, per-block e4m3 scale bytes,
// then fp4 codes packed two per byte, low nibble first (even index).
void write_qtensor(const std::string& path, const QuantizedBlockTensor& q);
QuantizedBlockTensor read_qtensor(const std::string& path);

// Checkpoint: the four weight tensors plus (k, seed, step) metadata.
struct WeightCheckpoint {
    MetisWeight weight;
    uint64_t seed = 0;
    uint64_t step = 0;
};

void write_checkpoint(const std::string& path, const WeightCheckpoint& ckpt);
WeightCheckpoint read_checkpoint(const std::string& path);

// Streaming JSON writer with stable field order and doubles printed at 17
// significant digits so every wide value roundtrips. Non-finite values are
// rejected at emit time with the offending field named.
class JsonWriter {
  public:
    JsonWriter& begin_object();
    JsonWriter& end_object();
    JsonWriter& begin_array(const std::string& key = "");
    JsonWriter& end_array();
    JsonWriter& key(const std::string& k);

    JsonWriter& value(double v);
    JsonWriter& value(const std::string& v);
    JsonWriter& value(const char* v);
    JsonWriter& value(bool v);
    JsonWriter& value(uint64_t v);
    JsonWriter& value(int64_t v);
    JsonWriter& value(int v) { return value(static_cast<int64_t>(v)); }

    JsonWriter& field(const std::string& k, double v) { return key(k).value(v); }
    JsonWriter& field(const std::string& k, const std::string& v) { return key(k).value(v); }
    JsonWriter& field(const std::string& k, const char* v) { return key(k).value(v); }
    JsonWriter& field(const std::string& k, bool v) { return key(k).value(v); }
    JsonWriter& field(const std::string& k, uint64_t v) { return key(k).value(v); }
    JsonWriter& field(const std::string& k, int64_t v) { return key(k).value(v); }
    JsonWriter& field(const std::string& k, int v) { return key(k).value(v); }

    JsonWriter& number_array(const std::string& k, std::span<const double> vs);

    std::string str() const;

  private:
    void prepare_value();

    std::string out_;
    std::vector<char> stack_;          // '{' or '['
    std::vector<bool> has_items_;
    std::vector<std::string> path_;    // for error messages
    std::string pending_key_;
    bool key_armed_ = false;
};

std::string format_double_17(double v);

// Wrap a payload in the report envelope. The payload must already be a
// serialized JSON value.
std::string envelope_json(const std::string& kind, const std::string& config_hash,
                          const std::string& payload_json);

// FNV-1a 64-bit, hex string. Used to fingerprint config echoes.
std::string fnv1a_hex(const std::string& bytes);

// Flat numeric series as CSV: header row, then one row per index. All
// columns must share a length; empty series produce a header-only file.
// Non-finite entries are rejected, naming the column.
std::string csv_series(const std::vector<std::string>& columns,
                       const std::vector<std::vector<double>>& data);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

} // namespace metis
