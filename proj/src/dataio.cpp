#include "modality/dataio.hpp"

#include <array>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "modality/error.hpp"

namespace modality::dataio {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'M', 'O', 'D', 'L', 'T', 'N', 'S', 'R'};
constexpr std::uint32_t kMaxRank = 4;
constexpr std::uint32_t kMaxEntries = 1u << 20;
constexpr std::uint32_t kMaxNameLength = 4096;
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 40;

template <typename T>
T byteswap_if_needed(T v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    }
}

template <typename T>
void put(std::ostream& os, T v) {
    v = byteswap_if_needed(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* field) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError(std::string("corrupt header: truncated while reading ") + field);
    return byteswap_if_needed(v);
}

std::uint64_t checked_product(const std::vector<std::uint64_t>& dims, const char* field) {
    std::uint64_t n = 1;
    for (auto d : dims) {
        if (d != 0 && n > kMaxElements / d) throw DataError(std::string("dimension overflow in ") + field);
        n *= d;
    }
    if (n > kMaxElements) throw DataError(std::string("dimension overflow in ") + field);
    return n;
}

bool valid_kind(std::uint32_t k) { return k >= 1 && k <= 5; }

void write_header(std::ostream& os, const TensorHeader& h) {
    if (h.dims.empty() || h.dims.size() > kMaxRank) throw DataError("bad rank: dims must have 1-4 entries");
    checked_product(h.dims, "dims");
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, kFormatVersion);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(h.kind));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(h.dtype));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(h.dims.size()));
    for (auto d : h.dims) put<std::uint64_t>(os, d);
    put<double>(os, h.frame_period_s);
    put<double>(os, h.origin);
    put<double>(os, h.aux);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(h.entries.size()));
    for (const auto& e : h.entries) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(e.dims.size()));
        for (auto d : e.dims) put<std::uint64_t>(os, d);
        put<std::uint64_t>(os, e.offset);
    }
}

template <typename T>
void write_payload(std::ostream& os, std::span<const T> payload) {
    for (std::size_t i = 0; i < payload.size(); ++i) {
        if (!std::isfinite(payload[i]))
            throw DataError("non-finite value in payload at element " + std::to_string(i));
    }
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(payload.data()),
                 static_cast<std::streamsize>(payload.size_bytes()));
    } else {
        for (T v : payload) put<T>(os, v);
    }
}

template <typename T>
std::vector<T> read_payload(std::istream& is, const TensorHeader& h, DType expected) {
    if (h.dtype != expected) throw DataError("bad dtype: payload type does not match the reader");
    const std::uint64_t n = h.element_count();
    std::vector<T> out(n);
    is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n * sizeof(T)));
    if (static_cast<std::uint64_t>(is.gcount()) != n * sizeof(T))
        throw DataError("truncated payload: expected " + std::to_string(n) + " values");
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = byteswap_if_needed(out[i]);
        if (!std::isfinite(out[i])) throw DataError("NaN or infinite value in payload at element " + std::to_string(i));
    }
    return out;
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    return os;
}

std::ifstream open_in(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path.string());
    return is;
}

void check_written(std::ostream& os, const fs::path& path) {
    os.flush();
    if (!os) throw DataError("write failed: " + path.string());
}

}  // namespace

long Pitchogram::origin_cents() const { return std::lround(pitch_origin * 100.0); }

Pitchogram Pitchogram::zeros(std::size_t frames, std::size_t rows, double pitch_origin) {
    Pitchogram p;
    p.pitch_origin = pitch_origin;
    p.values = Matrix(rows, frames, 0.0f);
    return p;
}

double LogFreqSpectrogram::bin_hz(double bin) const {
    return origin_hz * std::exp2(bin / static_cast<double>(bins_per_octave));
}

std::string to_string(DatasetTag tag) {
    switch (tag) {
        case DatasetTag::D1: return "D1";
        case DatasetTag::D2: return "D2";
        case DatasetTag::SYNTH: return "SYNTH";
    }
    return "SYNTH";
}

DatasetTag parse_dataset_tag(const std::string& s) {
    if (s == "D1") return DatasetTag::D1;
    if (s == "D2") return DatasetTag::D2;
    if (s == "SYNTH") return DatasetTag::SYNTH;
    throw DataError("unknown dataset tag '" + s + "'");
}

void validate(const Pitchogram& p) {
    if (!(p.frame_period_s > 0.0) || !std::isfinite(p.frame_period_s))
        throw DataError("invalid pitchogram: frame_period_s must be positive");
    if (!std::isfinite(p.pitch_origin)) throw DataError("invalid pitchogram: pitch_origin not finite");
    if (p.rows() < kMinPitchRows)
        throw DataError("invalid pitchogram: rows=" + std::to_string(p.rows()) + " < " +
                        std::to_string(kMinPitchRows));
    if (p.values.values.size() != p.rows() * p.frames())
        throw DataError("invalid pitchogram: values size does not match dims");
    for (std::size_t i = 0; i < p.values.values.size(); ++i) {
        const float v = p.values.values[i];
        if (std::isnan(v)) throw DataError("invalid pitchogram: NaN in values at element " + std::to_string(i));
        if (!std::isfinite(v) || v < 0.0f)
            throw DataError("invalid pitchogram: values must be finite and >= 0 (element " + std::to_string(i) + ")");
    }
}

void validate(const LogFreqSpectrogram& s) {
    if (s.bins_per_octave != kBinsPerOctave)
        throw DataError("invalid spectrogram: bins_per_octave must be 60");
    if (!(s.origin_hz > 0.0)) throw DataError("invalid spectrogram: origin_hz must be positive");
    if (!(s.frame_period_s > 0.0)) throw DataError("invalid spectrogram: frame_period_s must be positive");
    if (s.values.values.size() != s.bins() * s.frames())
        throw DataError("invalid spectrogram: values size does not match dims");
    for (std::size_t i = 0; i < s.values.values.size(); ++i) {
        const float v = s.values.values[i];
        if (!std::isfinite(v)) throw DataError("invalid spectrogram: NaN in values at element " + std::to_string(i));
        if (s.kind == SpectrumKind::magnitude && v < 0.0f)
            throw DataError("invalid spectrogram: magnitude values must be >= 0");
    }
}

std::uint64_t ManifestEntry::size() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

std::uint64_t TensorHeader::element_count() const { return checked_product(dims, "dims"); }

void write_tensor(std::ostream& os, const TensorHeader& h, std::span<const float> payload) {
    if (h.dtype != DType::f32) throw DataError("bad dtype: header says f64 but payload is f32");
    if (payload.size() != h.element_count()) throw DataError("payload size does not match dims");
    write_header(os, h);
    write_payload(os, payload);
}

void write_tensor(std::ostream& os, const TensorHeader& h, std::span<const double> payload) {
    if (h.dtype != DType::f64) throw DataError("bad dtype: header says f32 but payload is f64");
    if (payload.size() != h.element_count()) throw DataError("payload size does not match dims");
    write_header(os, h);
    write_payload(os, payload);
}

TensorHeader read_header(std::istream& is) {
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0) throw DataError("bad magic");
    TensorHeader h;
    const auto version = get<std::uint32_t>(is, "version");
    if (version != kFormatVersion) throw DataError("corrupt header: unsupported version " + std::to_string(version));
    const auto kind = get<std::uint32_t>(is, "kind");
    if (!valid_kind(kind)) throw DataError("corrupt header: bad kind code " + std::to_string(kind));
    h.kind = static_cast<TensorKind>(kind);
    const auto dtype = get<std::uint32_t>(is, "dtype");
    if (dtype != 1 && dtype != 2) throw DataError("corrupt header: bad dtype code " + std::to_string(dtype));
    h.dtype = static_cast<DType>(dtype);
    const auto rank = get<std::uint32_t>(is, "rank");
    if (rank == 0 || rank > kMaxRank) throw DataError("corrupt header: bad rank " + std::to_string(rank));
    h.dims.resize(rank);
    for (auto& d : h.dims) d = get<std::uint64_t>(is, "dims");
    checked_product(h.dims, "dims");
    h.frame_period_s = get<double>(is, "frame_period_s");
    h.origin = get<double>(is, "origin");
    h.aux = get<double>(is, "aux");
    if (!std::isfinite(h.frame_period_s)) throw DataError("corrupt header: frame_period_s not finite");
    if (!std::isfinite(h.origin)) throw DataError("corrupt header: origin not finite");
    if (!std::isfinite(h.aux)) throw DataError("corrupt header: aux not finite");
    const auto n_entries = get<std::uint32_t>(is, "n_entries");
    if (n_entries > kMaxEntries) throw DataError("corrupt header: too many manifest entries");
    const std::uint64_t total = h.element_count();
    h.entries.resize(n_entries);
    for (auto& e : h.entries) {
        const auto len = get<std::uint32_t>(is, "entry name length");
        if (len > kMaxNameLength) throw DataError("corrupt header: entry name too long");
        e.name.resize(len);
        is.read(e.name.data(), len);
        if (!is) throw DataError("corrupt header: truncated entry name");
        const auto erank = get<std::uint32_t>(is, "entry rank");
        if (erank > kMaxRank) throw DataError("corrupt header: bad entry rank for " + e.name);
        e.dims.resize(erank);
        for (auto& d : e.dims) d = get<std::uint64_t>(is, "entry dims");
        e.offset = get<std::uint64_t>(is, "entry offset");
        const auto n = checked_product(e.dims, "entry dims");
        if (e.offset > total || n > total - e.offset)
            throw DataError("corrupt header: entry '" + e.name + "' exceeds payload");
    }
    return h;
}

TensorHeader read_header(const fs::path& path) {
    auto is = open_in(path);
    return read_header(is);
}

std::vector<float> read_payload_f32(std::istream& is, const TensorHeader& h) {
    return read_payload<float>(is, h, DType::f32);
}

std::vector<double> read_payload_f64(std::istream& is, const TensorHeader& h) {
    return read_payload<double>(is, h, DType::f64);
}

void write_pitchogram(std::ostream& os, const Pitchogram& p) {
    validate(p);
    TensorHeader h;
    h.kind = TensorKind::pitchogram;
    h.dims = {p.rows(), p.frames()};
    h.frame_period_s = p.frame_period_s;
    h.origin = p.pitch_origin;
    write_tensor(os, h, std::span<const float>(p.values.values));
}

Pitchogram read_pitchogram(std::istream& is) {
    const auto h = read_header(is);
    if (h.kind != TensorKind::pitchogram) throw DataError("corrupt header: kind is not a pitchogram");
    if (h.dims.size() != 2) throw DataError("corrupt header: pitchogram rank must be 2");
    Pitchogram p;
    p.frame_period_s = h.frame_period_s;
    p.pitch_origin = h.origin;
    p.values.rows = h.dims[0];
    p.values.cols = h.dims[1];
    p.values.values = read_payload_f32(is, h);
    validate(p);
    return p;
}

void write_pitchogram(const fs::path& path, const Pitchogram& p) {
    auto os = open_out(path);
    write_pitchogram(os, p);
    check_written(os, path);
}

Pitchogram read_pitchogram(const fs::path& path) {
    auto is = open_in(path);
    return read_pitchogram(is);
}

void write_spectrogram(std::ostream& os, const LogFreqSpectrogram& s) {
    validate(s);
    TensorHeader h;
    h.kind = static_cast<TensorKind>(s.kind);
    h.dims = {s.bins(), s.frames()};
    h.frame_period_s = s.frame_period_s;
    h.origin = s.origin_hz;
    h.aux = s.bins_per_octave;
    write_tensor(os, h, std::span<const float>(s.values.values));
}

LogFreqSpectrogram read_spectrogram(std::istream& is) {
    const auto h = read_header(is);
    if (h.kind != TensorKind::magnitude && h.kind != TensorKind::whitened_db)
        throw DataError("corrupt header: kind is not a spectrogram");
    if (h.dims.size() != 2) throw DataError("corrupt header: spectrogram rank must be 2");
    LogFreqSpectrogram s;
    s.kind = static_cast<SpectrumKind>(h.kind);
    s.frame_period_s = h.frame_period_s;
    s.origin_hz = h.origin;
    s.bins_per_octave = static_cast<int>(h.aux);
    s.values.rows = h.dims[0];
    s.values.cols = h.dims[1];
    s.values.values = read_payload_f32(is, h);
    validate(s);
    return s;
}

void write_spectrogram(const fs::path& path, const LogFreqSpectrogram& s) {
    auto os = open_out(path);
    write_spectrogram(os, s);
    check_written(os, path);
}

LogFreqSpectrogram read_spectrogram(const fs::path& path) {
    auto is = open_in(path);
    return read_spectrogram(is);
}

void write_parameters(const fs::path& path, const std::vector<NamedArray>& arrays) {
    TensorHeader h;
    h.kind = TensorKind::parameters;
    h.dtype = DType::f64;
    std::vector<double> payload;
    for (const auto& a : arrays) {
        ManifestEntry e{a.name, a.dims, payload.size()};
        if (e.size() != a.values.size()) throw DataError("parameter '" + a.name + "' size does not match dims");
        h.entries.push_back(std::move(e));
        payload.insert(payload.end(), a.values.begin(), a.values.end());
    }
    h.dims = {payload.size()};
    auto os = open_out(path);
    write_tensor(os, h, std::span<const double>(payload));
    check_written(os, path);
}

std::vector<NamedArray> read_parameters(const fs::path& path) {
    auto is = open_in(path);
    const auto h = read_header(is);
    if (h.kind != TensorKind::parameters) throw DataError("corrupt header: kind is not a parameter container");
    const auto payload = read_payload_f64(is, h);
    std::vector<NamedArray> out;
    for (const auto& e : h.entries) {
        NamedArray a{e.name, e.dims, {}};
        a.values.assign(payload.begin() + static_cast<std::ptrdiff_t>(e.offset),
                        payload.begin() + static_cast<std::ptrdiff_t>(e.offset + e.size()));
        out.push_back(std::move(a));
    }
    return out;
}

const NamedArray& find_array(const std::vector<NamedArray>& arrays, const std::string& name) {
    for (const auto& a : arrays)
        if (a.name == name) return a;
    throw DataError("missing parameter array '" + name + "'");
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kManifestHeader = "id,dataset,rating,pitchogram,magnitude,whitened";

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

std::uint64_t header_frames(const fs::path& path) {
    const auto h = read_header(path);
    if (h.dims.size() != 2) throw DataError("tensor file has rank != 2: " + path.string());
    return h.dims[1];
}

}  // namespace

std::vector<ExcerptRecord> load_manifest(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("missing manifest: " + path.string());
    const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
    std::vector<ExcerptRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        if (line_no == 1 && line.rfind("id,", 0) == 0) continue;
        const auto f = split_csv(line);
        const std::string where = path.string() + ":" + std::to_string(line_no);
        if (f.size() != 6) throw DataError(where + ": expected 6 fields, got " + std::to_string(f.size()));
        ExcerptRecord r;
        r.id = trim(f[0]);
        if (r.id.empty()) throw DataError(where + ": empty id");
        try {
            r.dataset = parse_dataset_tag(trim(f[1]));
        } catch (const DataError& e) {
            throw DataError(where + ": " + e.what());
        }
        std::size_t used = 0;
        try {
            r.rating = std::stod(trim(f[2]), &used);
        } catch (const std::exception&) {
            throw DataError(where + ": rating '" + f[2] + "' is not a number");
        }
        if (!(r.rating >= 1.0 && r.rating <= 10.0))
            throw DataError(where + ": rating " + trim(f[2]) + " outside [1, 10]");
        r.pitchogram_path = resolve(base, trim(f[3]));
        r.magnitude_path = resolve(base, trim(f[4]));
        r.whitened_path = resolve(base, trim(f[5]));
        for (const auto* p : {&r.pitchogram_path, &r.magnitude_path, &r.whitened_path}) {
            if (!fs::exists(*p)) throw DataError(where + ": dangling file reference " + p->string());
        }
        const auto t0 = header_frames(r.pitchogram_path);
        if (header_frames(r.magnitude_path) != t0 || header_frames(r.whitened_path) != t0)
            throw DataError(where + ": frame counts differ between pitchogram and spectrograms");
        records.push_back(std::move(r));
    }
    return records;
}

void write_manifest(const fs::path& path, const std::vector<ExcerptRecord>& records) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    const fs::path base = fs::absolute(path).parent_path();
    auto rel = [&](const fs::path& p) {
        const auto r = fs::absolute(p).lexically_relative(base);
        return (r.empty() || *r.begin() == "..") ? fs::absolute(p).string() : r.string();
    };
    os << kManifestHeader << '\n';
    os.precision(17);
    for (const auto& r : records) {
        os << r.id << ',' << to_string(r.dataset) << ',' << r.rating << ',' << rel(r.pitchogram_path) << ','
           << rel(r.magnitude_path) << ',' << rel(r.whitened_path) << '\n';
    }
    check_written(os, path);
}

RatingsMatrix load_ratings(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("missing ratings file: " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(is, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        rows.push_back(split_csv(line));
    }
    RatingsMatrix m;
    if (rows.empty()) return m;
    m.listeners = rows.size();
    m.excerpts = rows.front().size();
    m.values.assign(m.listeners * m.excerpts, 0.0);
    m.present.assign(m.listeners * m.excerpts, 1);
    bool any_missing = false;
    for (std::size_t l = 0; l < rows.size(); ++l) {
        if (rows[l].size() != m.excerpts)
            throw DataError(path.string() + ": listener row " + std::to_string(l + 1) + " has wrong column count");
        for (std::size_t e = 0; e < m.excerpts; ++e) {
            const auto cell = trim(rows[l][e]);
            if (cell.empty() || cell == "NA") {
                m.present[l * m.excerpts + e] = 0;
                any_missing = true;
                continue;
            }
            const double v = std::stod(cell);
            if (!(v >= 1.0 && v <= 10.0))
                throw DataError(path.string() + ": rating outside [1, 10] at listener " + std::to_string(l + 1));
            m.at(l, e) = v;
        }
    }
    if (!any_missing) m.present.clear();
    return m;
}

}  // namespace modality::dataio
