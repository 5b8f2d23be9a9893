#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace wxr {

// Frozen pretrained encoder description. Stage indices are 1-based.
struct TeacherSpec {
    std::string name = "stub";
    std::vector<int64_t> stage_channels{16, 32, 64, 96, 128};
    // Cumulative downsampling of each stage output relative to the (resized) input.
    std::vector<int64_t> stage_strides{4, 4, 8, 16, 32};
    std::vector<int64_t> distill_stages{1, 3, 4, 5};
    int64_t global_dim = 512;
    // 0 keeps the native resolution, otherwise inputs are resized to a square of this size.
    int64_t input_size = 0;
    std::array<double, 3> mean{0.48145466, 0.4578275, 0.40821073};
    std::array<double, 3> std{0.26862954, 0.26130258, 0.27577711};

    void validate() const;
};

struct TeacherFeatures {
    std::vector<torch::Tensor> stage_features; // one per distill stage
    torch::Tensor global_embedding;
};

// Weather classes and their prompts ("An image with XXX").
struct PromptSet {
    std::vector<std::string> classes;
    std::vector<std::string> phrases;

    static PromptSet weather_default();
    std::vector<std::string> prompts() const;
    int64_t size() const { return static_cast<int64_t>(classes.size()); }
    // Index of a class name; throws ConfigError when unknown.
    int64_t index_of(const std::string& cls) const;
};

/// Frozen teacher encoder.
///
/// All entry points run without autograd and never modify weights. Inputs are
/// B x 3 x H x W images in [0, 1]; preprocessing (resize + normalization) is
/// applied here according to spec().
class Teacher {
public:
    virtual ~Teacher() = default;

    const TeacherSpec& spec() const { return spec_; }

    // One map per spec().distill_stages entry.
    std::vector<torch::Tensor> extract_stage_features(const torch::Tensor& images);
    torch::Tensor extract_global_embedding(const torch::Tensor& images);
    // K x global_dim, unit-norm rows.
    torch::Tensor text_class_embeddings(const PromptSet& prompts);
    TeacherFeatures extract(const torch::Tensor& images);

    // Digest over every weight; used to assert the teacher stays frozen.
    virtual uint64_t parameter_digest() const = 0;

protected:
    explicit Teacher(TeacherSpec spec);

    torch::Tensor preprocess(const torch::Tensor& images) const;
    // All 5 (or however many) stage outputs for preprocessed input.
    virtual std::vector<torch::Tensor> all_stages(const torch::Tensor& x) = 0;
    virtual torch::Tensor global(const torch::Tensor& x) = 0;
    virtual torch::Tensor text(const std::vector<std::string>& prompts) = 0;

    TeacherSpec spec_;
};

// Seeded random-weight convolutional teacher. Cheap, deterministic, needs no files.
class StubTeacher : public Teacher {
public:
    StubTeacher(TeacherSpec spec, uint64_t seed);
    ~StubTeacher() override;

    uint64_t parameter_digest() const override;

protected:
    std::vector<torch::Tensor> all_stages(const torch::Tensor& x) override;
    torch::Tensor global(const torch::Tensor& x) override;
    torch::Tensor text(const std::vector<std::string>& prompts) override;

private:
    struct Net;
    std::unique_ptr<Net> net_;
    uint64_t seed_;
};

/// Teacher exported as TorchScript (`<dir>/<name>.pt`).
///
/// The module must provide
///   stage_features(Tensor x) -> List[Tensor]   all stages of the convolutional encoder
///   global_embedding(Tensor x) -> Tensor       B x global_dim
/// and attributes `prompts: List[str]`, `text_table: Tensor` (one row per prompt)
/// since text tokenization is done at export time.
class TorchScriptTeacher : public Teacher {
public:
    TorchScriptTeacher(TeacherSpec spec, const std::filesystem::path& file);
    ~TorchScriptTeacher() override;

    uint64_t parameter_digest() const override;

protected:
    std::vector<torch::Tensor> all_stages(const torch::Tensor& x) override;
    torch::Tensor global(const torch::Tensor& x) override;
    torch::Tensor text(const std::vector<std::string>& prompts) override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct TeacherOptions {
    std::string kind = "stub"; // "stub" or "torchscript"
    std::string name = "stub";
    std::string dir;           // weights directory; WXR_TEACHER_DIR overrides when empty
    uint64_t seed = 1234;
    TeacherSpec spec;
};

// Throws TeacherLoadError with instructions when weights are missing.
std::unique_ptr<Teacher> make_teacher(const TeacherOptions& options);

// Parameter-free adaptive average pooling over the channel axis.
torch::Tensor channel_match(const torch::Tensor& feature, int64_t target_channels);
// Bilinear resize (align_corners = false); identity when sizes already match.
torch::Tensor resize_match(const torch::Tensor& feature, int64_t height, int64_t width);

/// Per-image teacher feature cache keyed by (teacher name, content digest).
///
/// Entries live in memory and, when a directory is given, on disk as one blob
/// per key:
///   magic "WXRF" | u32 version | u32 name_len | name | u32 tensor_count |
///   per tensor: u32 ndim | i64 dims[ndim] | f32 data | u64 checksum (FNV-1a of all preceding bytes)
/// Writes go to a temp file renamed into place.
class FeatureCache {
public:
    // Empty dir -> WXR_CACHE_DIR if set, otherwise memory only.
    explicit FeatureCache(std::filesystem::path dir = {});

    // Features for a single C x H x W image, computing and storing on miss.
    TeacherFeatures get_or_compute(Teacher& teacher, const torch::Tensor& image);
    // Batched convenience: stacks per-image results.
    TeacherFeatures get_or_compute_batch(Teacher& teacher, const torch::Tensor& images);

    std::optional<TeacherFeatures> lookup(const std::string& teacher_name, const torch::Tensor& image);
    void store(const std::string& teacher_name, const torch::Tensor& image, const TeacherFeatures& features);

    const std::filesystem::path& dir() const { return dir_; }
    int64_t hits() const { return hits_; }
    int64_t misses() const { return misses_; }

    static std::string key(const std::string& teacher_name, const torch::Tensor& image);
    static void write_blob(const std::filesystem::path& file, const std::string& teacher_name,
                           const TeacherFeatures& features);
    // Throws IoError on corrupt/mismatched blobs.
    static TeacherFeatures read_blob(const std::filesystem::path& file, const std::string& teacher_name);

private:
    std::filesystem::path dir_;
    std::map<std::string, TeacherFeatures> memory_;
    std::mutex mutex_;
    int64_t hits_ = 0;
    int64_t misses_ = 0;
};

} // namespace wxr
