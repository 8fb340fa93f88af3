/* Philox4x64-10 counter-based generator (Salmon et al., SC'11). */
#ifndef NELSON_LAB_PHILOX_H
#define NELSON_LAB_PHILOX_H

#include <math.h>
#include <stdint.h>

#define NL_PHILOX_M0 0xD2E7470EE14C6C93ULL
#define NL_PHILOX_M1 0xCA5A826395121157ULL
#define NL_PHILOX_W0 0x9E3779B97F4A7C15ULL
#define NL_PHILOX_W1 0xBB67AE8584CAA73BULL

static inline uint64_t nl_mulhilo64(uint64_t a, uint64_t b, uint64_t *hi)
{
    __uint128_t p = (__uint128_t)a * (__uint128_t)b;
    *hi = (uint64_t)(p >> 64);
    return (uint64_t)p;
}

static inline void nl_philox4x64(uint64_t c0, uint64_t c1, uint64_t c2, uint64_t c3,
                                 uint64_t k0, uint64_t k1, uint64_t out[4])
{
    uint64_t hi0, hi1, lo0, lo1;
    int r;
    for (r = 0; r < 10; r++) {
        if (r > 0) {
            k0 += NL_PHILOX_W0;
            k1 += NL_PHILOX_W1;
        }
        lo0 = nl_mulhilo64(NL_PHILOX_M0, c0, &hi0);
        lo1 = nl_mulhilo64(NL_PHILOX_M1, c2, &hi1);
        c0 = hi1 ^ c1 ^ k0;
        c1 = lo1;
        c2 = hi0 ^ c3 ^ k1;
        c3 = lo0;
    }
    out[0] = c0;
    out[1] = c1;
    out[2] = c2;
    out[3] = c3;
}

/* Open-interval uniform from the top 53 bits. */
static inline double nl_uniform(uint64_t v)
{
    return ((double)(v >> 11) + 0.5) * 1.1102230246251565e-16;
}

/* Two standard normals for (key, step, domain) by Box-Muller. */
static inline void nl_normal_pair(uint64_t seed, uint64_t traj, uint64_t step, uint64_t domain,
                                  double *z0, double *z1)
{
    uint64_t out[4];
    double r, a;
    nl_philox4x64(step, domain, 0, 0, seed, traj, out);
    r = sqrt(-2.0 * log(nl_uniform(out[0])));
    a = 6.283185307179586 * nl_uniform(out[1]);
    *z0 = r * cos(a);
    *z1 = r * sin(a);
}

#endif
