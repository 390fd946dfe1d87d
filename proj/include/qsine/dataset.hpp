#pragma once

#include <qsine/errors.hpp>
#include <qsine/quantizer.hpp>
#include <qsine/rng.hpp>
#include <qsine/signal.hpp>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace qsine {

/// Builds example `index` of the dataset described by `cfg`: draw, synthesize,
/// add noise at the frame's SNR, normalize to unit per-sample power, quantize,
/// vectorize. Depends only on (cfg, index).
inline LabeledExample make_example(const GenConfig& cfg, std::uint64_t index, const QuantizerSpec& q) {
    Rng rng = make_rng(cfg.seed, index);
    LabeledExample ex;
    ex.label = draw_parameters(cfg, rng);
    ex.snr_db = cfg.snr_max_db ? uniform(rng, cfg.snr_db, *cfg.snr_max_db) : cfg.snr_db;
    const ComplexFrame u = synthesize(ex.label, cfg.N);
    const ComplexFrame y = add_noise(u, ex.snr_db, signal_power(ex.label), rng);
    const ComplexFrame s = normalize_power(y);
    ex.x = to_iq(cfg.unquantized ? s : quantize(s, q));
    return ex;
}

inline LabeledExample make_example(const GenConfig& cfg, std::uint64_t index) {
    return make_example(cfg, index, make_quantizer(cfg.bits));
}

inline std::vector<LabeledExample> make_dataset(const GenConfig& cfg, std::size_t count) {
    cfg.validate();
    if (count < 1) {
        throw ParameterError("make_dataset: count must be >= 1");
    }
    const QuantizerSpec q = make_quantizer(cfg.bits);
    std::vector<LabeledExample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(make_example(cfg, i, q));
    }
    return out;
}

// ---------------------------------------------------------------------------
// On-disk format: `<prefix>.labels.csv` (header line, then one CSV row per
// example) and `<prefix>.samples.f32` (little-endian float32, N x 2 row-major
// per example, same order).

struct DatasetHeader {
    std::size_t N = 0;
    std::size_t M = 0;
    int bits = 0;
};

inline std::string labels_path(const std::string& prefix) { return prefix + ".labels.csv"; }
inline std::string samples_path(const std::string& prefix) { return prefix + ".samples.f32"; }

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_f32_le(std::ostream& os, float v) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap32(bits);
    }
    os.write(reinterpret_cast<const char*>(&bits), 4);
}

inline float read_f32_le(std::istream& is) {
    std::uint32_t bits = 0;
    if (!is.read(reinterpret_cast<char*>(&bits), 4)) {
        throw DataError("unexpected end of binary stream");
    }
    if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap32(bits);
    }
    return std::bit_cast<float>(bits);
}

} // namespace detail

inline std::string dataset_header_line(const DatasetHeader& h) {
    return "qsine-dataset v1, N=" + std::to_string(h.N) + ", M=" + std::to_string(h.M) +
           ", bits=" + std::to_string(h.bits);
}

inline DatasetHeader parse_dataset_header(const std::string& line) {
    DatasetHeader h;
    unsigned long n = 0;
    unsigned long m = 0;
    int b = 0;
    if (std::sscanf(line.c_str(), "qsine-dataset v1, N=%lu, M=%lu, bits=%d", &n, &m, &b) != 3) {
        throw DataError("dataset: bad header line: " + line);
    }
    h.N = n;
    h.M = m;
    h.bits = b;
    return h;
}

inline void write_dataset(const std::string& prefix, const DatasetHeader& header,
                          const std::vector<LabeledExample>& examples) {
    std::ofstream labels(labels_path(prefix), std::ios::binary);
    std::ofstream samples(samples_path(prefix), std::ios::binary);
    if (!labels || !samples) {
        throw DataError("dataset: cannot open output files for prefix " + prefix);
    }
    labels << dataset_header_line(header) << '\n';
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& ex = examples[i];
        if (ex.x.rows != header.N) {
            throw DataError("dataset: example frame length does not match header");
        }
        labels << i << ',' << ex.label.count() << ',' << detail::format_double(ex.snr_db);
        for (const auto* vec : {&ex.label.amps, &ex.label.freqs, &ex.label.phases}) {
            for (double v : *vec) {
                labels << ',' << detail::format_double(v);
            }
        }
        labels << '\n';
        for (double v : ex.x.data) {
            detail::write_f32_le(samples, static_cast<float>(v));
        }
    }
    if (!labels || !samples) {
        throw DataError("dataset: write failed for prefix " + prefix);
    }
}

struct Dataset {
    DatasetHeader header;
    std::vector<LabeledExample> examples;
};

inline Dataset read_dataset(const std::string& prefix) {
    std::ifstream labels(labels_path(prefix));
    std::ifstream samples(samples_path(prefix), std::ios::binary);
    if (!labels || !samples) {
        throw DataError("dataset: cannot open files for prefix " + prefix);
    }
    Dataset ds;
    std::string line;
    if (!std::getline(labels, line)) {
        throw DataError("dataset: empty labels file");
    }
    ds.header = parse_dataset_header(line);
    while (std::getline(labels, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<double> fields;
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            fields.push_back(std::stod(tok));
        }
        if (fields.size() < 3) {
            throw DataError("dataset: short label row");
        }
        const auto m = static_cast<std::size_t>(fields[1]);
        if (fields.size() != 3 + 3 * m) {
            throw DataError("dataset: label row has wrong field count");
        }
        LabeledExample ex;
        ex.snr_db = fields[2];
        ex.label.amps.assign(fields.begin() + 3, fields.begin() + 3 + static_cast<std::ptrdiff_t>(m));
        ex.label.freqs.assign(fields.begin() + 3 + static_cast<std::ptrdiff_t>(m),
                              fields.begin() + 3 + 2 * static_cast<std::ptrdiff_t>(m));
        ex.label.phases.assign(fields.begin() + 3 + 2 * static_cast<std::ptrdiff_t>(m), fields.end());
        ex.x = IQFrame(ds.header.N);
        for (auto& v : ex.x.data) {
            v = detail::read_f32_le(samples);
        }
        ds.examples.push_back(std::move(ex));
    }
    if (samples.peek() != std::char_traits<char>::eof()) {
        throw DataError("dataset: samples file longer than labels file");
    }
    return ds;
}

} // namespace qsine
