#pragma once

#include "subtag/bpe.hpp"
#include "subtag/corpus.hpp"
#include "subtag/embeddings.hpp"
#include "subtag/error.hpp"
#include "subtag/metrics.hpp"
#include "subtag/nn.hpp"
#include "subtag/protocol.hpp"
#include "subtag/random.hpp"
#include "subtag/shapes.hpp"
#include "subtag/tagger.hpp"
#include "subtag/unicode.hpp"
