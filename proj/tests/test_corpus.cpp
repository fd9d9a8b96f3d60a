#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "mdprune/corpus.hpp"

using namespace mdprune;

TEST(Corpus, CharacterMapping) {
    EXPECT_EQ(char_to_id(' '), 0u);
    EXPECT_EQ(char_to_id('a'), 1u);
    EXPECT_EQ(char_to_id('Z'), 26u);
    EXPECT_EQ(char_to_id('!'), 0u);
    for (std::size_t i = 0; i < kAlphabetSize; ++i) EXPECT_EQ(char_to_id(id_to_char(i)), i);
}

TEST(Corpus, GeneratorIsSeededAndShaped) {
    CorpusConfig cfg;
    cfg.documents = 5;
    cfg.document_length = 40;
    const auto a = generate_markov_corpus(cfg);
    EXPECT_EQ(a, generate_markov_corpus(cfg));
    ASSERT_EQ(a.size(), 5u);
    for (const auto& d : a) EXPECT_EQ(d.size(), 40u);
    cfg.seed = 8;
    EXPECT_NE(a, generate_markov_corpus(cfg));
    cfg.documents = 0;
    EXPECT_THROW(generate_markov_corpus(cfg), std::invalid_argument);
}

TEST(Corpus, GeneratedTextIsPredictable) {
    // an order-2 source with few preferred successors has low conditional entropy
    CorpusConfig cfg;
    cfg.documents = 50;
    const auto docs = generate_markov_corpus(cfg);
    std::map<std::string, std::map<char, int>> counts;
    for (const auto& d : docs)
        for (std::size_t i = 2; i < d.size(); ++i) counts[d.substr(i - 2, 2)][d[i]]++;
    double top = 0, total = 0;
    for (const auto& [ctx, next] : counts) {
        int best = 0, sum = 0;
        for (const auto& [c, n] : next) {
            best = std::max(best, n);
            sum += n;
        }
        top += best;
        total += sum;
    }
    EXPECT_GT(top / total, 0.4);
}

TEST(Corpus, FileRoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "mdprune_corpus_test.txt";
    const std::vector<std::string> docs{"hello world", "abc def"};
    write_corpus(path, docs);
    EXPECT_EQ(read_corpus(path), docs);
    std::filesystem::remove(path);
    EXPECT_THROW(read_corpus(path), std::runtime_error);
}

TEST(Corpus, SequencesAndSplit) {
    const auto set = make_sequences({"abcdefghij"}, 4);
    ASSERT_EQ(set.size(), 2u);
    EXPECT_EQ(set.sequences[0], (Sequence{1, 2, 3, 4, 5}));
    EXPECT_EQ(set.sequences[1], (Sequence{5, 6, 7, 8, 9}));
    EXPECT_EQ(set.row_count(), 8u);
    EXPECT_NO_THROW(set.validate());
    EXPECT_THROW(make_sequences({"abc"}, 0), std::invalid_argument);

    const auto split = split_by_index(make_sequences({std::string(41, 'a')}, 4), 0.1);
    EXPECT_EQ(split.train.size(), 9u);
    EXPECT_EQ(split.heldout.size(), 1u);
    EXPECT_THROW(split_by_index(set.subset(0, 1)), std::invalid_argument);
}

TEST(Corpus, ValidateRejectsBadBatches) {
    CalibrationSet s{{{1, 2, 3}, {1, 2}}, 4, kAlphabetSize};
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s.sequences = {{1, 30}};
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s.sequences = {{1, 2, 3, 4, 5, 6}};
    EXPECT_THROW(s.validate(), std::invalid_argument);
}
