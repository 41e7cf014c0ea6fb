#ifndef MOMINEQ_H
#define MOMINEQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MomineqStatus {
  MOMINEQ_STATUS_OK = 0,
  MOMINEQ_STATUS_NULL_POINTER = 1,
  MOMINEQ_STATUS_INVALID_ARGUMENT = 2,
  MOMINEQ_STATUS_SHAPE_MISMATCH = 3,
  MOMINEQ_STATUS_NOT_POSITIVE_DEFINITE = 4,
  MOMINEQ_STATUS_INFEASIBLE = 5,
  MOMINEQ_STATUS_NO_CONVERGENCE = 6,
  MOMINEQ_STATUS_NOT_SOLVED = 7,
  MOMINEQ_STATUS_BUFFER_TOO_SMALL = 8,
  MOMINEQ_STATUS_INTERNAL = 9,
  MOMINEQ_STATUS_PANIC = 10,
} MomineqStatus;

/**
 * Result of eliminating the nuisance block from `B mu + C delta >= d`.
 */
typedef struct MomineqElimination MomineqElimination;

/**
 * Projection problem `min n (pbar - k)' S^{-1} (pbar - k)` s.t. `A k <= rho`,
 * with the most recent solution.
 */
typedef struct MomineqQp MomineqQp;

/**
 * Outcome of the refined chi-squared decision.
 */
typedef struct MomineqRccResult {
  double statistic;
  size_t r_hat;
  /**
   * Standardised slack; NaN unless `r_hat == 1`.
   */
  double z;
  /**
   * Nonzero when `z` is infinite.
   */
  int32_t z_infinite;
  double beta;
  double critical;
  /**
   * Nonzero when the null is rejected.
   */
  int32_t reject;
} MomineqRccResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *momineq_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated
 * and NUL-terminated). Returns the full message length excluding the
 * terminator, or 0 when there is no error.
 */
size_t momineq_last_error_message(char *buf, size_t len);

/**
 * Standard normal distribution function.
 */
double momineq_std_normal_cdf(double x);

/**
 * Chi-squared distribution function; NaN for `df == 0`.
 */
double momineq_chi2_cdf(size_t df, double q);

/**
 * Chi-squared quantile at probability `p` in (0, 1).
 */
enum MomineqStatus momineq_chi2_quantile(size_t df, double p, double *out);

/**
 * Creates a problem of dimension `dim` with `rows` constraints.
 * `sigma` is `dim x dim`, `a` is `rows x dim`.
 */
enum MomineqStatus momineq_qp_new(size_t dim,
                                  size_t rows,
                                  const double *pbar,
                                  const double *sigma,
                                  const double *a,
                                  const double *rho,
                                  size_t n,
                                  struct MomineqQp **out);

/**
 * Releases a handle; null is ignored.
 */
void momineq_qp_free(struct MomineqQp *qp);

/**
 * Solves the projection and stores the solution in the handle.
 * `statistic` may be null.
 */
enum MomineqStatus momineq_qp_solve(struct MomineqQp *qp, double *statistic);

/**
 * Copies the minimizer (length `dim`) into `out`.
 */
enum MomineqStatus momineq_qp_kappa(const struct MomineqQp *qp, double *out, size_t len);

/**
 * Copies the Lagrange multipliers (length `rows`) into `out`.
 */
enum MomineqStatus momineq_qp_multipliers(const struct MomineqQp *qp, double *out, size_t len);

/**
 * Number of active rows in the stored solution; 0 when unsolved or null.
 */
size_t momineq_qp_active_count(const struct MomineqQp *qp);

/**
 * Copies the active row indices (ascending) into `out`.
 */
enum MomineqStatus momineq_qp_active_rows(const struct MomineqQp *qp, size_t *out, size_t len);

/**
 * Runs the refined chi-squared decision at level `alpha` in (0, 1/2],
 * solving first when needed.
 */
enum MomineqStatus momineq_qp_rcc(struct MomineqQp *qp, double alpha, struct MomineqRccResult *out);

/**
 * Eliminates `delta`: `b` is `k x dm`, `c` is `k x dn`, `d` has length `k`.
 */
enum MomineqStatus momineq_eliminate(size_t k,
                                     size_t dm,
                                     size_t dn,
                                     const double *b,
                                     const double *c,
                                     const double *d,
                                     struct MomineqElimination **out);

/**
 * Releases a handle; null is ignored.
 */
void momineq_elimination_free(struct MomineqElimination *e);

/**
 * Number of vertices `m` (rows of `A`, `b` and `H`); 0 for null.
 */
size_t momineq_elimination_rows(const struct MomineqElimination *e);

/**
 * Copies `A` (`m x dm`, row-major) into `out`.
 */
enum MomineqStatus momineq_elimination_a(const struct MomineqElimination *e,
                                         double *out,
                                         size_t len);

/**
 * Copies `b` (length `m`) into `out`.
 */
enum MomineqStatus momineq_elimination_b(const struct MomineqElimination *e,
                                         double *out,
                                         size_t len);

/**
 * Copies the vertex matrix `H` (`m x k`, row-major) into `out`.
 */
enum MomineqStatus momineq_elimination_h(const struct MomineqElimination *e,
                                         double *out,
                                         size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOMINEQ_H */
