#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hba/image_io.hpp"
#include "hba/tensor.hpp"

namespace hba {

// one dataset record at its original resolution
struct FundusSample {
    std::string id;
    int width = 0, height = 0;
    std::vector<std::uint8_t> rgb; // H*W*3
    float fovea_x = 0, fovea_y = 0; // original pixel coordinates (x = column)
    std::optional<std::vector<std::uint8_t>> od_mask; // H*W, values {0,1}
    std::optional<std::pair<float, float>> od_xy;
};

// binary training target: channel 0 fovea disc, channel 1 optic disc
struct TargetMask {
    int size = 0;
    std::vector<std::uint8_t> fovea;
    std::vector<std::uint8_t> od;
    bool has_od = false;
};

struct PreprocessOpts {
    int out_size = 512;
    float fovea_radius_at_512 = 32.f; // scaled proportionally for other sizes
};

// network-ready sample in resized space
struct TrainSample {
    std::string id;
    TensorPtr<float> image; // {1,3,S,S}, values in [0,1]
    TargetMask target;
    float scale_x = 1, scale_y = 1; // original px per resized px
    float fovea_x = 0, fovea_y = 0; // resized coordinates
    std::optional<std::pair<float, float>> od_xy; // resized, when ground truth exists
};

// Dataset layout: root/images/<id>.png, optional root/od_masks/<id>.png
// (white = OD), root/fovea.csv with header id,x,y, optional root/od.csv.
std::vector<FundusSample> load_dataset(const std::string& root);
void write_dataset(const std::string& root, const std::vector<FundusSample>& samples);

// resize, rescale coordinates, binarize the OD mask, draw the fovea disc
TrainSample preprocess(const FundusSample& sample, const PreprocessOpts& opts);

// rotation about the image center (bilinear image / nearest mask, black
// fill), then optional horizontal and vertical flips
void augment_with(Tensor<float>& image, TargetMask& mask, double angle_rad, bool flip_h, bool flip_v);

// draws angle ~ U(-0.2, 0.2) rad and independent 0.5-probability flips
void augment(Tensor<float>& image, TargetMask& mask, Rng& rng);

struct SplitIndices {
    std::vector<int> train, val, test;
};

// deterministic 85/15 train/test split with 20% of train held out
SplitIndices split_dataset(std::size_t n_samples, std::uint64_t seed);

// Procedural fundus images with exact ground truth: bright elliptical OD,
// darker macular spot at the fovea, vessel arcs from the disc, and
// disease_level-controlled bright/dark lesions.
std::vector<FundusSample> synth_fundus(int n, int size, double disease_level, std::uint64_t seed);

TensorPtr<float> target_to_tensor(const TargetMask& mask);

} // namespace hba
