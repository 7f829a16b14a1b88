#pragma once

#include "currseq/checkpoint.hpp"
#include "currseq/corpus.hpp"
#include "currseq/curriculum.hpp"
#include "currseq/digest.hpp"
#include "currseq/errors.hpp"
#include "currseq/gradcheck.hpp"
#include "currseq/model.hpp"
#include "currseq/optimizer.hpp"
#include "currseq/plan.hpp"
#include "currseq/pool_io.hpp"
#include "currseq/report.hpp"
#include "currseq/rng.hpp"
#include "currseq/sampling.hpp"
#include "currseq/synthetic.hpp"
#include "currseq/trainer.hpp"
#include "currseq/vocab.hpp"
