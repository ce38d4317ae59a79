#pragma once

#include "aben/autograd.hpp"
#include "aben/dataset.hpp"
#include "aben/decoder.hpp"
#include "aben/encoder.hpp"
#include "aben/errors.hpp"
#include "aben/genbranch.hpp"
#include "aben/image.hpp"
#include "aben/lab.hpp"
#include "aben/metrics.hpp"
#include "aben/model.hpp"
#include "aben/nn.hpp"
#include "aben/random.hpp"
#include "aben/tokenizer.hpp"
#include "aben/vab.hpp"
#include "aben/checkpoint.hpp"
#include "aben/inference.hpp"
#include "aben/synthetic.hpp"
#include "aben/training.hpp"
