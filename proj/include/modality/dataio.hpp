#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace modality::dataio {

inline constexpr double kFramePeriod = 0.0058;
inline constexpr double kDefaultPitchOrigin = 24.0;
inline constexpr std::size_t kDefaultPitchRows = 7301;
// MIDI 26-96 plus the 141-cent smoothing half-width plus a 50 cent retune.
inline constexpr std::size_t kMinPitchRows = 7101;
inline constexpr int kBinsPerOctave = 60;
inline constexpr std::size_t kDefaultSpectrumBins = 540;

/// Row-major float matrix (rows x cols).
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> values;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), values(r * c, fill) {}

    float& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    float operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    std::span<float> row(std::size_t r) { return {values.data() + r * cols, cols}; }
    std::span<const float> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

/// Fundamental-frequency activations at 1 cent per row; columns are frames.
struct Pitchogram {
    double frame_period_s = kFramePeriod;
    double pitch_origin = kDefaultPitchOrigin;  // MIDI pitch of row 0
    Matrix values;                              // rows x frames

    std::size_t rows() const { return values.rows; }
    std::size_t frames() const { return values.cols; }
    // Absolute cent value (MIDI * 100) of row 0.
    long origin_cents() const;

    static Pitchogram zeros(std::size_t frames, std::size_t rows = kDefaultPitchRows,
                            double pitch_origin = kDefaultPitchOrigin);
};

enum class SpectrumKind : std::uint32_t { magnitude = 2, whitened_db = 3 };

/// Log-frequency spectrogram with 60 bins per octave; rows are bins.
struct LogFreqSpectrogram {
    int bins_per_octave = kBinsPerOctave;
    double origin_hz = 0.0;
    SpectrumKind kind = SpectrumKind::magnitude;
    double frame_period_s = kFramePeriod;
    Matrix values;  // bins x frames

    std::size_t bins() const { return values.rows; }
    std::size_t frames() const { return values.cols; }
    double bin_hz(double bin) const;
};

enum class DatasetTag { D1, D2, SYNTH };

std::string to_string(DatasetTag tag);
DatasetTag parse_dataset_tag(const std::string& s);

struct ExcerptRecord {
    std::string id;
    DatasetTag dataset = DatasetTag::SYNTH;
    double rating = 1.0;
    std::filesystem::path pitchogram_path;
    std::filesystem::path magnitude_path;
    std::filesystem::path whitened_path;
};

/// Listener x excerpt ratings on the 1-10 scale with an optional presence mask.
struct RatingsMatrix {
    std::size_t listeners = 0;
    std::size_t excerpts = 0;
    std::vector<double> values;
    std::vector<std::uint8_t> present;  // empty means fully observed

    RatingsMatrix() = default;
    RatingsMatrix(std::size_t n_listeners, std::size_t n_excerpts)
        : listeners(n_listeners), excerpts(n_excerpts), values(n_listeners * n_excerpts, 0.0) {}

    double& at(std::size_t l, std::size_t e) { return values[l * excerpts + e]; }
    double at(std::size_t l, std::size_t e) const { return values[l * excerpts + e]; }
    bool has(std::size_t l, std::size_t e) const { return present.empty() || present[l * excerpts + e] != 0; }
};

RatingsMatrix load_ratings(const std::filesystem::path& path);

void validate(const Pitchogram& p);
void validate(const LogFreqSpectrogram& s);

// ---------------------------------------------------------------------------
// Binary tensor container.
//
// Layout (little endian):
//   magic "MODLTNSR", u32 version, u32 kind, u32 dtype, u32 rank, u64 dims[rank],
//   f64 frame_period_s, f64 origin, f64 aux, u32 n_entries,
//   entries { u32 name_len, name, u32 rank, u64 dims[rank], u64 offset },
//   payload (row-major, f32 or f64).
// ---------------------------------------------------------------------------

enum class TensorKind : std::uint32_t {
    pitchogram = 1,
    magnitude = 2,
    whitened_db = 3,
    scale_stack = 4,
    parameters = 5,
};

enum class DType : std::uint32_t { f32 = 1, f64 = 2 };

struct ManifestEntry {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::uint64_t offset = 0;  // in elements

    std::uint64_t size() const;
};

struct TensorHeader {
    TensorKind kind = TensorKind::pitchogram;
    DType dtype = DType::f32;
    std::vector<std::uint64_t> dims;
    double frame_period_s = 0.0;
    double origin = 0.0;
    double aux = 0.0;
    std::vector<ManifestEntry> entries;

    std::uint64_t element_count() const;
};

inline constexpr std::uint32_t kFormatVersion = 1;

void write_tensor(std::ostream& os, const TensorHeader& h, std::span<const float> payload);
void write_tensor(std::ostream& os, const TensorHeader& h, std::span<const double> payload);
TensorHeader read_header(std::istream& is);
// Reads header and payload; f64 payloads are rejected by the f32 reader and vice versa.
std::vector<float> read_payload_f32(std::istream& is, const TensorHeader& h);
std::vector<double> read_payload_f64(std::istream& is, const TensorHeader& h);

TensorHeader read_header(const std::filesystem::path& path);

void write_pitchogram(std::ostream& os, const Pitchogram& p);
Pitchogram read_pitchogram(std::istream& is);
void write_pitchogram(const std::filesystem::path& path, const Pitchogram& p);
Pitchogram read_pitchogram(const std::filesystem::path& path);

void write_spectrogram(std::ostream& os, const LogFreqSpectrogram& s);
LogFreqSpectrogram read_spectrogram(std::istream& is);
void write_spectrogram(const std::filesystem::path& path, const LogFreqSpectrogram& s);
LogFreqSpectrogram read_spectrogram(const std::filesystem::path& path);

/// Named f64 arrays persisted in one parameter container.
struct NamedArray {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<double> values;
};

void write_parameters(const std::filesystem::path& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_parameters(const std::filesystem::path& path);
const NamedArray& find_array(const std::vector<NamedArray>& arrays, const std::string& name);

// ---------------------------------------------------------------------------
// Manifest: header `id,dataset,rating,pitchogram,magnitude,whitened`; file
// paths are relative to the manifest's directory.
// ---------------------------------------------------------------------------

std::vector<ExcerptRecord> load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ExcerptRecord>& records);

// ---------------------------------------------------------------------------
// Synthetic excerpts.
// ---------------------------------------------------------------------------

struct SynthSpec {
    std::string id = "synth";
    int key_class = 0;              // 0-11
    double major_fraction = 0.5;    // fraction of chords that are major triads
    int n_chords = 8;
    double chord_dur_s = 1.0;
    double vibrato_cents = 0.0;
    double vibrato_hz = 5.5;
    int tuning_offset_cents = 0;    // [-50, 49]
    double noise_level = 0.05;
    std::uint64_t seed = 0;
    // Chord notes played one after another instead of together.
    bool arpeggiate = false;
    double lead_silence_s = 0.0;
    double tail_silence_s = 0.0;
    DatasetTag dataset = DatasetTag::SYNTH;
};

void validate(const SynthSpec& spec);
inline double synth_rating(const SynthSpec& spec) { return 1.0 + 9.0 * spec.major_fraction; }

struct SynthChord {
    int root = 0;            // pitch class
    bool major = true;
    std::size_t begin = 0;   // frame range [begin, end)
    std::size_t end = 0;
    std::vector<int> notes;  // MIDI pitches
};

struct SynthExcerpt {
    Pitchogram pitchogram;
    LogFreqSpectrogram magnitude;
    LogFreqSpectrogram whitened;
    ExcerptRecord record;
    std::vector<SynthChord> chords;
};

SynthExcerpt synth_excerpt(const SynthSpec& spec);

/// Ranges for drawing synthetic specs; every field is sampled uniformly.
struct SynthRanges {
    std::string prefix = "synth";
    int chords_min = 6;
    int chords_max = 10;
    double chord_dur_min_s = 0.8;
    double chord_dur_max_s = 1.2;
    double vibrato_max_cents = 30.0;
    double noise_level = 0.05;
    double silence_max_s = 0.5;
    bool arpeggiate = false;
    DatasetTag dataset = DatasetTag::SYNTH;
};

/// Spec number `index` of a seeded collection. The major fraction is k / n_chords
/// with k uniform in 0..n_chords, so the rating matches the chord content exactly.
SynthSpec sample_synth_spec(const SynthRanges& ranges, std::size_t index, std::uint64_t seed);

/// Writes the three tensors for `ex` into `dir` as <id>.pitch/.mag/.wdb and
/// fills the record's paths (absolute).
ExcerptRecord write_excerpt(const std::filesystem::path& dir, const SynthExcerpt& ex);

}  // namespace modality::dataio
