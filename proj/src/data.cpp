#include "fedscal/data.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

namespace fedscal {

namespace {

// x -> A*x + b
Vector apply_affine(const Matrix& a, const Vector& b, const Vector& x) {
    Vector y = mat_vec(a, x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
    return y;
}

Vector gaussian_vector(std::size_t d, RngStream& rng) {
    Vector v(d);
    for (double& x : v) x = rng.next_gaussian();
    return v;
}

// Orthonormalizes the columns of a gaussian matrix (modified Gram-Schmidt).
Matrix random_orthogonal(std::size_t d, RngStream& rng) {
    Matrix q(d, d);
    for (double& x : q.data) x = rng.next_gaussian();
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t k = 0; k < j; ++k) {
            double proj = 0.0;
            for (std::size_t i = 0; i < d; ++i) proj += q(i, j) * q(i, k);
            for (std::size_t i = 0; i < d; ++i) q(i, j) -= proj * q(i, k);
        }
        double nrm = 0.0;
        for (std::size_t i = 0; i < d; ++i) nrm += q(i, j) * q(i, j);
        nrm = std::sqrt(nrm);
        if (nrm < 1e-9) throw std::runtime_error("random_orthogonal: degenerate column");
        for (std::size_t i = 0; i < d; ++i) q(i, j) /= nrm;
    }
    return q;
}

}  // namespace

std::vector<LabeledSample> generate_domain(const DomainSpec& spec, RngStream& rng) {
    std::vector<LabeledSample> out;
    out.reserve(spec.num_classes() * static_cast<std::size_t>(spec.samples_per_class));
    const std::size_t d = spec.dim();
    for (std::size_t j = 0; j < spec.num_classes(); ++j) {
        for (int s = 0; s < spec.samples_per_class; ++s) {
            Vector x = spec.class_means[j];
            for (std::size_t i = 0; i < d; ++i)
                x[i] += spec.within_class_std * rng.next_gaussian();
            out.push_back({apply_affine(spec.affine, spec.shift, x),
                           static_cast<int>(j)});
        }
    }
    return out;
}

Federation build_federation(const DomainSpec& source,
                            const std::vector<DomainSpec>& targets,
                            int clients_per_domain, RngStream& rng,
                            std::size_t min_shard_size) {
    if (targets.empty())
        throw std::invalid_argument("build_federation: no target domains");
    if (clients_per_domain < 1)
        throw std::invalid_argument("build_federation: clients_per_domain < 1");

    Federation fed;
    fed.source = generate_domain(source, rng);

    int client_id = 0;
    for (const DomainSpec& spec : targets) {
        std::vector<LabeledSample> pool = generate_domain(spec, rng);

        // iid shard assignment: shuffle then contiguous near-equal split
        std::vector<std::size_t> order(pool.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.next_below(i)]);

        const std::size_t n = pool.size();
        const std::size_t c = static_cast<std::size_t>(clients_per_domain);
        std::size_t pos = 0;
        for (std::size_t s = 0; s < c; ++s) {
            const std::size_t take = n / c + (s < n % c ? 1 : 0);
            if (take < min_shard_size)
                throw std::invalid_argument(
                    "build_federation: shard smaller than minimum size");
            ClientDataset ds;
            ds.client_id = client_id++;
            ds.domain_id = spec.domain_id;
            ds.samples.reserve(take);
            for (std::size_t i = 0; i < take; ++i)
                ds.samples.push_back(pool[order[pos++]]);
            fed.clients.push_back(std::move(ds));
        }
    }
    return fed;
}

Vector weak_augment(const Vector& x, const AugmentationConfig& cfg, RngStream& rng) {
    Vector y = x;
    for (double& v : y) v += cfg.weak_noise_std * rng.next_gaussian();
    return y;
}

Vector strong_augment(const Vector& x, const AugmentationConfig& cfg, RngStream& rng) {
    Vector y = x;
    for (double& v : y) {
        if (rng.next_double() < cfg.strong_mask_prob) v = 0.0;
    }
    for (double& v : y) v += cfg.strong_noise_std * rng.next_gaussian();
    return y;
}

AugmentedBatch augment_batch(const std::vector<Vector>& xs,
                             const AugmentationConfig& cfg, RngStream& rng) {
    AugmentedBatch out;
    out.weak.reserve(xs.size());
    out.strong.reserve(xs.size());
    for (const Vector& x : xs) {
        out.weak.push_back(weak_augment(x, cfg, rng));
        out.strong.push_back(strong_augment(x, cfg, rng));
    }
    return out;
}

std::vector<DomainSpec> make_synthetic_domains(const SyntheticGeometry& geo,
                                               std::uint64_t seed) {
    RngStream rng(seed, {0xDA7A0001ULL});
    const std::size_t d = geo.dim;

    std::vector<Vector> means(geo.num_classes);
    for (Vector& m : means) {
        m = gaussian_vector(d, rng);
        for (double& v : m) v *= geo.class_mean_scale;
    }

    std::vector<DomainSpec> domains;

    DomainSpec src;
    src.domain_id = 0;
    src.class_means = means;
    src.within_class_std = geo.within_class_std;
    src.affine = Matrix(d, d);
    for (std::size_t i = 0; i < d; ++i) src.affine(i, i) = 1.0;
    src.shift = Vector(d, 0.0);
    src.samples_per_class = geo.samples_per_class;
    domains.push_back(std::move(src));

    // Blend identity with a random map whose singular values sit in
    // [0.85, 1.2]; capping t keeps the blend's condition number well under
    // the spec'd bound of 100.
    const double t = std::min(geo.shift_strength, 0.42);
    for (int m = 1; m <= geo.num_target_domains; ++m) {
        Matrix q = random_orthogonal(d, rng);
        Matrix r = random_orthogonal(d, rng);
        Vector sv(d);
        for (double& s : sv) s = 0.85 + 0.35 * rng.next_double();

        Matrix a(d, d);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < d; ++k) acc += q(i, k) * sv[k] * r(j, k);
                a(i, j) = (1.0 - t) * (i == j ? 1.0 : 0.0) + t * acc;
            }

        Vector b = gaussian_vector(d, rng);
        const double nb = norm2(b);
        for (double& v : b) v = v / nb * geo.translation_scale;

        DomainSpec spec;
        spec.domain_id = m;
        spec.class_means = means;
        spec.within_class_std = geo.within_class_std;
        spec.affine = std::move(a);
        spec.shift = std::move(b);
        spec.samples_per_class = geo.samples_per_class;
        domains.push_back(std::move(spec));
    }
    return domains;
}

void dump_samples_jsonl(std::ostream& os, const std::vector<LabeledSample>& samples,
                        int domain_id) {
    for (const LabeledSample& s : samples) {
        nlohmann::json j;
        j["domain"] = domain_id;
        j["label"] = s.true_label;
        j["features"] = s.features;
        os << j.dump() << '\n';
    }
}

std::vector<LabeledSample> load_samples_jsonl(std::istream& is, int* domain_id) {
    std::vector<LabeledSample> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        LabeledSample s;
        s.true_label = j.at("label").get<int>();
        s.features = j.at("features").get<Vector>();
        if (domain_id) *domain_id = j.at("domain").get<int>();
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace fedscal
