#pragma once

// Values frozen from the first verified run.

// make_planted_scene(0, 8x8, k=3)
#define GOLDEN_LABEL_MAP                                                                                      \
  {0, 0, 0, 0, 0, 0, 0, 0, 3, 3, 3, 0, 0, 0, 0, 0, 3, 3, 3, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, \
   1, 1, 1, 0, 0, 2, 2, 0, 0, 0, 0, 0, 0, 2, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}
// Mean within- and between-entity cosine of that scene, sigma 0.1, 8 channels.
#define GOLDEN_WITHIN 0.938518
#define GOLDEN_BETWEEN 0.0784878
#define GOLDEN_ATTENTION 13834214506101224214ULL
#define GOLDEN_EXAMPLE_LABEL 0
#define GOLDEN_EXAMPLE_QUERY_TOKEN 2
#define GOLDEN_EXAMPLE_PATCHES 569940535267626985ULL
#define GOLDEN_EXAMPLE_FEATURES 10806380796793402992ULL
#define GOLDEN_QUICK_METRICS 15943912206694719237ULL
#define GOLDEN_TRACE_HASH 1657659541776857811ULL
#define GOLDEN_STATES_L2 7635801681490502017ULL
#define GOLDEN_ATTENTION_L3 2658469502845388667ULL
