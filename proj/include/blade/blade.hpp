#pragma once

#include "blade/common.hpp"
#include "blade/core.hpp"
#include "blade/corpus.hpp"
#include "blade/dataset.hpp"
#include "blade/embeddings.hpp"
#include "blade/evaluation.hpp"
#include "blade/exemplar_db.hpp"
#include "blade/features.hpp"
#include "blade/model.hpp"
#include "blade/reranker.hpp"
#include "blade/training.hpp"
