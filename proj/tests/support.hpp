#pragma once

#include "atlas/config.hpp"
#include "atlas/corpus.hpp"
#include "atlas/numcore.hpp"

#include <doctest.h>

#include <filesystem>
#include <random>
#include <string>

namespace testing {

inline atlas::Matrix random_matrix(atlas::Index rows, atlas::Index cols, std::mt19937_64& rng, double scale = 1.0)
{
    std::normal_distribution<double> n(0.0, scale);
    atlas::Matrix m(rows, cols);
    for (atlas::Index i = 0; i < m.size(); ++i)
        m.data()[i] = n(rng);
    return m;
}

inline double max_abs_diff(const atlas::Matrix& a, const atlas::Matrix& b)
{
    REQUIRE(a.rows() == b.rows());
    REQUIRE(a.cols() == b.cols());
    return (a - b).cwiseAbs().maxCoeff();
}

/// Fresh empty directory under the build tree's temp area.
inline std::filesystem::path scratch_dir(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / ("atlas_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

/// Corpus small enough for a model to train on in well under a second.
inline atlas::CorpusSpec tiny_spec(std::uint64_t seed = 1)
{
    atlas::CorpusSpec s;
    s.seed = seed;
    s.train_sentences = 60;
    s.test_sentences = 20;
    s.min_length = 4;
    s.max_length = 8;
    s.vocab_size = 18;
    s.group_size = 3;
    s.pos_classes = 4;
    s.lexicon_words = 8;
    return s;
}

/// Run settings sized for tiny_spec corpora.
inline atlas::RunConfig tiny_run_config()
{
    atlas::RunConfig c;
    c.layers = 2;
    c.width = 8;
    c.enc_heads = 2;
    c.max_len = 8;
    c.fusion_heads = 2;
    c.pos_dim = 4;
    c.epochs = 1;
    c.batch_size = 8;
    c.gmm_init_sample = 16;
    return c;
}

}  // namespace testing
