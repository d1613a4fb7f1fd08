#ifndef FEDOAP_H
#define FEDOAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum FedoapStatus {
  FEDOAP_STATUS_OK = 0,
  FEDOAP_STATUS_NULL_POINTER = 1,
  FEDOAP_STATUS_INVALID_UTF8 = 2,
  FEDOAP_STATUS_INVALID_ARGUMENT = 3,
  FEDOAP_STATUS_CONFIG = 4,
  FEDOAP_STATUS_IO = 5,
  FEDOAP_STATUS_PROTOCOL = 6,
  FEDOAP_STATUS_DATA = 7,
  FEDOAP_STATUS_FORMULA_MISMATCH = 8,
  FEDOAP_STATUS_BUFFER_TOO_SMALL = 9,
  FEDOAP_STATUS_PANIC = 10,
} FedoapStatus;

/**
 * Experiment configuration.
 */
typedef struct FedoapConfig FedoapConfig;

/**
 * Result of a training run.
 */
typedef struct FedoapReport FedoapReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fedoap_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`) and returns the full message
 * length without the terminator. Empty after a successful call.
 *
 * # Safety
 * `buf` is null or points to `len` writable bytes.
 */
size_t fedoap_last_error(char *buf, size_t len);

/**
 * Default configuration.
 *
 * # Safety
 * `out` is null or points to writable storage for one handle.
 */
enum FedoapStatus fedoap_config_default(struct FedoapConfig **out);

/**
 * Configuration from a flat JSON object with the same keys as the CLI
 * config file; missing keys take their defaults.
 *
 * # Safety
 * `json` is null or a NUL-terminated string; `out` is null or writable.
 */
enum FedoapStatus fedoap_config_from_json(const char *json, struct FedoapConfig **out);

/**
 * # Safety
 * `config` is null or a handle from this library not yet freed.
 */
void fedoap_config_free(struct FedoapConfig *config);

/**
 * Runs alignment, fine-tuning and test evaluation for every configured
 * seed. Blocks until done.
 *
 * # Safety
 * `config` is a live handle or null; `out` is null or writable.
 */
enum FedoapStatus fedoap_train(const struct FedoapConfig *config, struct FedoapReport **out);

/**
 * Mean test Dice over clients, averaged over seeds.
 *
 * # Safety
 * `report` is a live handle or null; `out` is null or writable.
 */
enum FedoapStatus fedoap_report_mean_test_dice(const struct FedoapReport *report, double *out);

/**
 * # Safety
 * `report` is a live handle or null; `out` is null or writable.
 */
enum FedoapStatus fedoap_report_client_count(const struct FedoapReport *report, size_t *out);

/**
 * Test Dice of client `index`, averaged over seeds.
 *
 * # Safety
 * `report` is a live handle or null; `out` is null or writable.
 */
enum FedoapStatus fedoap_report_client_test_dice(const struct FedoapReport *report,
                                                 size_t index,
                                                 double *out);

/**
 * The full report as compact JSON. `needed` receives the length without
 * the terminator; with a too-small `buf` nothing is copied and the status
 * is `BUFFER_TOO_SMALL`, so a first call with `len = 0` sizes the buffer.
 *
 * # Safety
 * `report` is a live handle or null; `buf` is null or has `len` writable
 * bytes; `needed` is null or writable.
 */
enum FedoapStatus fedoap_report_json(const struct FedoapReport *report,
                                     char *buf,
                                     size_t len,
                                     size_t *needed);

/**
 * # Safety
 * `report` is null or a handle from this library not yet freed.
 */
void fedoap_report_free(struct FedoapReport *report);

/**
 * Closed-form bytes per client per round for the configured model,
 * strategy, client count and anchor size, plus the whole round's total.
 *
 * # Safety
 * `config` is a live handle or null; the out pointers are null or writable.
 */
enum FedoapStatus fedoap_transmission_bytes(const struct FedoapConfig *config,
                                            uint64_t *uplink,
                                            uint64_t *downlink,
                                            uint64_t *round_total);

/**
 * Dice of two binary masks of `len` values each (0 or 1). Two empty masks
 * score 1.
 *
 * # Safety
 * `pred` and `target` are null or point to `len` readable values; `out`
 * is null or writable.
 */
enum FedoapStatus fedoap_dice_score(const double *pred,
                                    const double *target,
                                    size_t len,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDOAP_H */
