#ifndef FEDSCAL_DATA_HPP
#define FEDSCAL_DATA_HPP

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "fedscal/numerics.hpp"
#include "fedscal/rng.hpp"

namespace fedscal {

// One synthetic domain: shared class-mean geometry pushed through a
// per-domain affine map, realizing covariate shift between domains.
struct DomainSpec {
    int domain_id = 0;
    std::vector<Vector> class_means;  // J vectors in R^d
    double within_class_std = 1.0;
    Matrix affine;                    // d x d, well-conditioned by construction
    Vector shift;                     // d
    int samples_per_class = 0;

    std::size_t dim() const { return class_means.empty() ? 0 : class_means[0].size(); }
    std::size_t num_classes() const { return class_means.size(); }
};

struct LabeledSample {
    Vector features;
    int true_label = -1;
};

struct ClientDataset {
    int client_id = -1;
    int domain_id = -1;
    std::vector<LabeledSample> samples;
};

// Restricted view handed to adaptation code: exposes features only, so the
// training path cannot read true labels even by accident.
class UnlabeledView {
public:
    explicit UnlabeledView(const ClientDataset& ds) : ds_(&ds) {}

    std::size_t size() const { return ds_->samples.size(); }
    const Vector& features(std::size_t i) const { return ds_->samples[i].features; }
    int client_id() const { return ds_->client_id; }

private:
    const ClientDataset* ds_;
};

// Feature-space weak/strong augmentation pair. Weak adds small gaussian
// noise; strong masks coordinates to zero and adds larger noise, so the
// strong distortion dominates the weak one.
struct AugmentationConfig {
    double weak_noise_std = 0.0;    // sigma_w >= 0
    double strong_noise_std = 0.0;  // sigma_s >= sigma_w
    double strong_mask_prob = 0.0;  // in [0, 1)
};

std::vector<LabeledSample> generate_domain(const DomainSpec& spec, RngStream& rng);

struct Federation {
    std::vector<LabeledSample> source;
    std::vector<ClientDataset> clients;
};

// Splits each target domain's pool into clients_per_domain disjoint,
// near-equal shards. Throws std::invalid_argument if any shard would end
// up smaller than min_shard_size.
Federation build_federation(const DomainSpec& source,
                            const std::vector<DomainSpec>& targets,
                            int clients_per_domain, RngStream& rng,
                            std::size_t min_shard_size = 1);

Vector weak_augment(const Vector& x, const AugmentationConfig& cfg, RngStream& rng);
Vector strong_augment(const Vector& x, const AugmentationConfig& cfg, RngStream& rng);

struct AugmentedBatch {
    std::vector<Vector> weak;
    std::vector<Vector> strong;
};

// One weak and one strong augmentation per sample; the weak view is shared
// between the client and server alignment paths.
AugmentedBatch augment_batch(const std::vector<Vector>& xs,
                             const AugmentationConfig& cfg, RngStream& rng);

// Knobs for synthesizing a covariate-shifted domain family from a seed.
// shift_strength blends the identity map with a random well-conditioned
// linear map; translation_scale sets the length of the additive shift.
struct SyntheticGeometry {
    std::size_t dim = 16;
    std::size_t num_classes = 8;
    int samples_per_class = 60;
    int num_target_domains = 3;
    double class_mean_scale = 2.0;
    double within_class_std = 0.8;
    double shift_strength = 0.35;
    double translation_scale = 0.8;
};

// Domain 0 is the source (identity affine); domains 1..num_target_domains
// are shifted targets sharing the source class-mean geometry.
std::vector<DomainSpec> make_synthetic_domains(const SyntheticGeometry& geo,
                                               std::uint64_t seed);

// JSON-lines dataset dump/load (one sample per line) for fixture pinning.
void dump_samples_jsonl(std::ostream& os, const std::vector<LabeledSample>& samples,
                        int domain_id);
std::vector<LabeledSample> load_samples_jsonl(std::istream& is, int* domain_id = nullptr);

}  // namespace fedscal

#endif
