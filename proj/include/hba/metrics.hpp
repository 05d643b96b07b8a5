#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hba/data.hpp"
#include "hba/model.hpp"

namespace hba {

struct Centroid {
    double x = 0, y = 0; // x = column, y = row, pixel-center convention
    long size = 0;
};

// Binarize at the threshold (strictly greater), keep the largest
// 4-connected component (ties: the component seen first in scan order),
// return its mean pixel coordinates. Empty -> nullopt.
std::optional<Centroid> extract_centroid(const float* prob, int h, int w, float threshold = 0.5f);

double euclidean_distance(double x1, double y1, double x2, double y2);

// 2|P n G| / (|P| + |G|); defined as 1.0 when both masks are empty
double dice_coefficient(const std::uint8_t* pred, const std::uint8_t* truth, std::size_t n);

enum class Basis { Resized, Original };

struct EvalRow {
    std::string id;
    std::optional<double> fovea_ed, od_ed, od_dc;
};

struct EvalReport {
    Basis basis = Basis::Resized;
    int resolution = 0; // side length EDs were computed at (resized basis)
    std::vector<EvalRow> rows;
    std::optional<double> mean_fovea_ed, mean_od_ed, mean_od_dc;
    int n_fovea = 0, n_od_ed = 0, n_od_dc = 0; // defined per-image entries
};

// image tensor {1,3,S,S} -> logits {1,2,S,S}; called once per sample in
// report (id-sorted) order
using InferFn = std::function<TensorPtr<float>(const TensorPtr<float>&)>;

// captures params by reference; the model must outlive the returned functor
InferFn make_model_infer(const ModelParams<float>& params);

// Inference plus centroid/ED/DC per sample. EDs are reported in the chosen
// basis; the Dice coefficient is always computed in resized space against
// the preprocessed ground-truth mask. Missing predictions or missing ground
// truth leave the entry undefined rather than zero.
EvalReport evaluate(const InferFn& infer, const std::vector<FundusSample>& samples,
                    const PreprocessOpts& opts, Basis basis, float threshold = 0.5f);

// id,fovea_ed,od_ed,od_dc rows plus a trailing mean row
void write_report_csv(const std::string& path, const EvalReport& report);

// prediction contours over the input (fovea green, OD blue) with the
// ground-truth fovea crossed in yellow
void write_overlay_png(const std::string& path, const TrainSample& sample,
                       const std::vector<std::uint8_t>& fovea_pred,
                       const std::vector<std::uint8_t>& od_pred);

} // namespace hba
