#pragma once

#include <vector>

#include "onerec/corpus.hpp"
#include "onerec/data.hpp"
#include "onerec/model.hpp"
#include "onerec/rqkmeans.hpp"
#include "onerec/vocab.hpp"

namespace onerec::testutil {

/// Small synthetic world: corpus, 3-level tokenizer, vocabulary and catalogue.
struct World {
  corpus::SyntheticCorpus synthetic;
  rq::TokenizerModel tokenizer;
  vocab::Vocab vocab;
  data::ItemCatalog catalog;

  const std::vector<corpus::UserRecord>& users() const { return synthetic.corpus.users; }

  model::ModelConfig model_config(int d_model = 32, int context_len = 64) const {
    model::ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 4;
    c.d_model = d_model;
    c.d_ff = 4 * d_model;
    c.context_len = context_len;
    c.vocab_size = vocab.size();
    c.seed = 1;
    return c;
  }
};

inline World make_world(std::uint64_t seed, int n_users = 200, int n_items = 256) {
  World w;
  corpus::SyntheticConfig sc;
  sc.n_users = n_users;
  sc.n_items = n_items;
  sc.seed = seed;
  w.synthetic = corpus::generate_synthetic_corpus(sc);
  const std::vector<int> sizes{8, 16, 16};
  w.tokenizer = rq::fit_tokenizer(rq::embedding_matrix(w.synthetic.corpus.items), sizes, seed);
  w.vocab = vocab::build_vocab(w.tokenizer);
  w.catalog = data::ItemCatalog(w.synthetic.corpus, w.tokenizer, w.vocab);
  return w;
}

}  // namespace onerec::testutil
