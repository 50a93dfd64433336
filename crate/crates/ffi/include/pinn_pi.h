#ifndef PINN_PI_H
#define PINN_PI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PinnStatus {
  PINN_STATUS_OK = 0,
  PINN_STATUS_NULL_POINTER = 1,
  PINN_STATUS_INVALID_ARGUMENT = 2,
  PINN_STATUS_CONFIG = 3,
  PINN_STATUS_NUMERICAL = 4,
  PINN_STATUS_ASSUMPTION = 5,
  PINN_STATUS_STRUCTURE = 6,
  PINN_STATUS_ORACLE = 7,
  PINN_STATUS_UNSUPPORTED = 8,
  PINN_STATUS_FORMAT = 9,
  PINN_STATUS_IO = 10,
  PINN_STATUS_PANIC = 11,
} PinnStatus;

// A value network.
typedef struct PinnNet PinnNet;

// A control problem built from the catalog.
typedef struct PinnProblem PinnProblem;

// Discounted Riccati solution of an unconstrained LQR problem.
typedef struct PinnRiccati PinnRiccati;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread. The pointer stays valid
// until the next failing call on the same thread.
const char *pinnpi_last_error(void);

// Library version as a static NUL-terminated string.
const char *pinnpi_version(void);

// Build a catalog problem from a TOML table such as
// `name = "lqr"\nd = 2\nseed = 7`. `seed` is used when the table has none.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` a valid pointer.
enum PinnStatus pinnpi_problem_new(const char *toml, uint64_t seed, struct PinnProblem **out);

// # Safety
// `p` must be NULL or a handle from [`pinnpi_problem_new`] not yet freed.
void pinnpi_problem_free(struct PinnProblem *p);

// State dimension, or 0 for a NULL handle.
//
// # Safety
// `p` must be NULL or a live problem handle.
size_t pinnpi_problem_state_dim(const struct PinnProblem *p);

// Action dimension, or 0 for a NULL handle.
//
// # Safety
// `p` must be NULL or a live problem handle.
size_t pinnpi_problem_action_dim(const struct PinnProblem *p);

// Greedy action for co-state `z` at state `x`.
//
// # Safety
// `x` and `z` point to `state_dim` doubles, `a_out` to `action_dim` doubles.
enum PinnStatus pinnpi_greedy_action(const struct PinnProblem *p,
                                     const double *x,
                                     const double *z,
                                     size_t state_dim,
                                     double *a_out,
                                     size_t action_dim);

// Solve the discounted Riccati equation of an LQR catalog problem.
//
// # Safety
// `p` must be a live problem handle and `out` a valid pointer.
enum PinnStatus pinnpi_riccati_new(const struct PinnProblem *p, struct PinnRiccati **out);

// # Safety
// `r` must be NULL or a live Riccati handle.
void pinnpi_riccati_free(struct PinnRiccati *r);

// Copy `P` (column-major, `dim × dim`) and the constant `c` of `V = -xᵀPx + c`.
//
// # Safety
// `p_out` points to `dim * dim` doubles, `c_out` to one double.
enum PinnStatus pinnpi_riccati_matrix(const struct PinnRiccati *r,
                                      double *p_out,
                                      size_t dim,
                                      double *c_out);

// Riccati value at `x`.
//
// # Safety
// `x` points to `dim` doubles, `out` to one double.
enum PinnStatus pinnpi_riccati_value(const struct PinnRiccati *r,
                                     const double *x,
                                     size_t dim,
                                     double *out);

// Load a checkpoint. When `problem_out` is non-NULL and the checkpoint
// references a problem, that problem is built and returned too (NULL
// otherwise).
//
// # Safety
// `path` is a NUL-terminated string; `out` is valid; `problem_out` is NULL or valid.
enum PinnStatus pinnpi_net_load(const char *path,
                                struct PinnNet **out,
                                struct PinnProblem **problem_out);

// Write a checkpoint; `problem` may be NULL.
//
// # Safety
// `net` is live, `problem` is NULL or live, `path` is NUL-terminated.
enum PinnStatus pinnpi_net_save(const struct PinnNet *net,
                                const struct PinnProblem *problem,
                                const char *path);

// # Safety
// `net` must be NULL or a live network handle.
void pinnpi_net_free(struct PinnNet *net);

// Input dimension, or 0 for a NULL handle.
//
// # Safety
// `net` must be NULL or a live network handle.
size_t pinnpi_net_input_dim(const struct PinnNet *net);

// Value, gradient and `tr(σσᵀ∇²v)` at `x`, using the problem's diffusion.
// `grad_out` and `trace_out` may be NULL.
//
// # Safety
// `x` and `grad_out` (if non-NULL) point to `dim` doubles.
enum PinnStatus pinnpi_net_eval(const struct PinnNet *net,
                                const struct PinnProblem *problem,
                                const double *x,
                                size_t dim,
                                double *value_out,
                                double *grad_out,
                                double *trace_out);

// HJB residual of the net at `x` under action `a`.
//
// # Safety
// `x` points to `state_dim` doubles, `a` to `action_dim`, `out` to one.
enum PinnStatus pinnpi_net_residual(const struct PinnNet *net,
                                    const struct PinnProblem *problem,
                                    const double *x,
                                    size_t state_dim,
                                    const double *a,
                                    size_t action_dim,
                                    double *out);

// Run the full policy-iteration loop described by a TOML run configuration
// and return the final network. `iterations_out` may be NULL.
//
// # Safety
// `config_toml` is NUL-terminated; `net_out` is valid.
enum PinnStatus pinnpi_solve(const char *config_toml,
                             struct PinnNet **net_out,
                             size_t *iterations_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PINN_PI_H */
