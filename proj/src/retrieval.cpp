#include "rns/retrieval.hpp"

#include <algorithm>
#include <numeric>
#include <thread>

namespace rns {

namespace {

// Top-k store indices for one row of scores; ordering (score desc, entry id asc).
void select_top_k(const Eigen::Ref<const Eigen::VectorXd>& scores, const std::vector<std::uint64_t>& entry_ids,
                  std::size_t k, std::vector<std::size_t>& idx) {
  idx.resize(static_cast<std::size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto better = [&](std::size_t a, std::size_t b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    return entry_ids[a] < entry_ids[b];
  };
  const std::size_t keep = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(), better);
  idx.resize(keep);
}

}  // namespace

std::vector<std::size_t> knn(const Eigen::Ref<const Eigen::VectorXd>& query, const SupportStore& store,
                             std::size_t k) {
  if (store.empty()) throw Error(ErrorKind::EmptyStore, "kNN over an empty support store");
  if (k == 0) throw Error(ErrorKind::InvalidArgument, "k must be at least 1");
  if (static_cast<std::size_t>(query.size()) != store.dim())
    throw Error(ErrorKind::DimensionMismatch, "query dimension differs from store");
  const Eigen::VectorXd scores = store.vectors().cast<double>() * query;
  std::vector<std::size_t> idx;
  select_top_k(scores, store.entry_ids(), k, idx);
  return idx;
}

RetrievedSet retrieve_for_image(const DenseFeatureMap& x, const SupportStore& store, std::size_t k,
                                unsigned threads) {
  if (store.empty()) throw Error(ErrorKind::EmptyStore, "retrieval over an empty support store");
  if (k == 0) throw Error(ErrorKind::InvalidArgument, "k must be at least 1");
  if (x.dim() != store.dim()) throw Error(ErrorKind::DimensionMismatch, "feature dimension differs from store");

  // n x |V| similarity matrix; one product so every row sees the same kernel.
  const RowMatrixXd scores = x.data * store.vectors().cast<double>().transpose();
  const std::size_t n = x.patches();

  std::vector<char> hit(store.size(), 0);
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  std::vector<std::vector<char>> partial(workers, std::vector<char>(store.size(), 0));
  auto work = [&](unsigned w) {
    std::vector<std::size_t> idx;
    for (std::size_t j = w; j < n; j += workers) {
      select_top_k(scores.row(static_cast<Eigen::Index>(j)).transpose(), store.entry_ids(), k, idx);
      for (std::size_t i : idx) partial[w][i] = 1;
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, w);
  }
  for (const auto& p : partial)
    for (std::size_t i = 0; i < p.size(); ++i) hit[i] |= p[i];

  RetrievedSet out;
  for (std::size_t i = 0; i < hit.size(); ++i)
    if (hit[i]) out.entries.push_back(i);
  std::sort(out.entries.begin(), out.entries.end(),
            [&](std::size_t a, std::size_t b) { return store.entry_ids()[a] < store.entry_ids()[b]; });
  for (std::size_t i : out.entries) out.classes.push_back(store.class_ids()[i]);
  std::sort(out.classes.begin(), out.classes.end());
  out.classes.erase(std::unique(out.classes.begin(), out.classes.end()), out.classes.end());
  return out;
}

Eigen::VectorXd global_average_feature(const DenseFeatureMap& x) {
  if (x.patches() == 0) throw Error(ErrorKind::InvalidArgument, "feature map has no patches");
  return x.data.colwise().mean().transpose();
}

Eigen::VectorXd class_relevance_weights(const DenseFeatureMap& x, const TextBank& bank, double tau) {
  if (bank.dim() != x.dim()) throw Error(ErrorKind::DimensionMismatch, "text bank dimension differs from features");
  const Eigen::VectorXd scores = bank.features * global_average_feature(x);
  return softmax(scores, tau);
}

Eigen::VectorXd relevance_weights_or_fallback(const DenseFeatureMap& x, const TextBank& bank, double tau) {
  if (bank.all_absent) return Eigen::VectorXd::Ones(static_cast<Eigen::Index>(bank.num_classes()));
  return class_relevance_weights(x, bank, tau);
}

}  // namespace rns
