#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "colosim/cost_model.hpp"
#include "colosim/maps.hpp"
#include "colosim/profiles.hpp"

namespace colosim {

/// Byte-accurate device accounting with cache-allocator semantics: frees mark
/// buffers reserved instead of returning them, and new allocations consume
/// reserved bytes before claiming fresh capacity. `allocated` is the device
/// watermark and must never exceed capacity.
struct MemoryLedger {
    std::uint64_t capacity = 0;
    std::uint64_t allocated = 0;
    std::uint64_t reserved = 0;  // freed-but-reusable portion of allocated
    std::uint64_t peak_allocated = 0;

    std::uint64_t live() const { return allocated - reserved; }

    /// false = would_oom, ledger unchanged.
    [[nodiscard]] bool try_allocate(std::uint64_t bytes) {
        if (live() + bytes > capacity) return false;
        std::uint64_t reuse = std::min(reserved, bytes);
        reserved -= reuse;
        allocated += bytes - reuse;
        peak_allocated = std::max(peak_allocated, allocated);
        return true;
    }

    void free_bytes(std::uint64_t bytes) {
        if (bytes > live()) throw std::logic_error("ledger: freeing more than live bytes");
        reserved += bytes;
    }
};

enum class Residency { DeviceOnly, DeviceAndHost, HostOnly, Dropped };

struct LayerActivation {
    std::uint64_t recorded_bytes = 0;  // total recorded for this layer so far
    std::uint64_t host_bytes = 0;      // portion whose async copy has completed
    double last_copy_done = 0;         // completion time of the latest scheduled copy
    bool on_device = false;
    bool consumed = false;  // backward already used it; bytes released
    bool dropped = false;

    Residency residency() const {
        if (dropped) return Residency::Dropped;
        if (on_device) return host_bytes >= recorded_bytes ? Residency::DeviceAndHost : Residency::DeviceOnly;
        return Residency::HostOnly;
    }
};

/// Single-channel transfer lane; submissions serialize FIFO.
struct TransferChannel {
    double busy_until = 0;

    /// Returns completion time of a copy submitted at `now`.
    double submit(double now, double duration) {
        double start = std::max(now, busy_until);
        busy_until = start + duration;
        return busy_until;
    }
};

/// The single-slot activation cache. Layer entries grow as recording passes
/// run; freeing always takes the lowest device-resident layers so HostOnly
/// entries form a forward-order prefix of the not-yet-consumed stack.
struct ActivationStore {
    std::vector<LayerActivation> layers;
    std::uint64_t cached_tokens = 0;  // trained tokens charged to the slot
    TrainingMode mode = TrainingMode::CPA;
    double created_at = 0;
    std::optional<double> label_ready_at;
    bool stream_to_host = false;  // AllToHost regime: never retain on device
    std::uint64_t kv_bytes_held = 0;
    std::uint64_t generation = 0;  // bumps on teardown; stale timer/label guard
    std::uint64_t source_query = 0;
    int last_recorded_layer = -1;  // per-pass ordering contract

    explicit ActivationStore(std::uint64_t num_layers) : layers(num_layers) {}

    void begin_recording_pass() { last_recorded_layer = -1; }

    std::uint64_t device_act_bytes() const {
        std::uint64_t b = 0;
        for (const auto& l : layers)
            if (l.on_device) b += l.recorded_bytes;
        return b;
    }

    std::uint64_t device_footprint() const { return device_act_bytes() + kv_bytes_held; }

    /// Layers freed to host and not yet loaded back or consumed.
    std::uint64_t host_only_pending() const {
        std::uint64_t n = 0;
        for (const auto& l : layers)
            if (!l.on_device && !l.consumed && !l.dropped && l.recorded_bytes > 0) ++n;
        return n;
    }

    std::uint64_t device_resident_layers() const {
        std::uint64_t n = 0;
        for (const auto& l : layers)
            if (l.on_device) ++n;
        return n;
    }
};

/// One recorded layer segment: allocates on device unless streaming, and
/// schedules its async host copy. Segments recorded into a layer that was
/// already evicted follow it to the host (the device buffer is gone).
/// Returns the copy completion time. Layer indices must be strictly
/// increasing within a pass.
inline double record_activation(ActivationStore& store, MemoryLedger& ledger,
                                TransferChannel& d2h, const GpuProfile& gpu, std::uint64_t layer,
                                std::uint64_t bytes, double now, bool stream_to_host) {
    if (static_cast<int>(layer) <= store.last_recorded_layer)
        throw std::logic_error("record_activation: layer index not strictly increasing within pass");
    store.last_recorded_layer = static_cast<int>(layer);
    auto& entry = store.layers.at(layer);
    entry.dropped = false;  // a fresh segment starts a new incarnation
    bool to_host = stream_to_host || (entry.recorded_bytes > 0 && !entry.on_device);
    if (!to_host) {
        if (!ledger.try_allocate(bytes))
            throw std::logic_error("record_activation: device allocation failed");
        entry.on_device = true;
    }
    entry.recorded_bytes += bytes;
    double done = d2h.submit(now, transfer_time(gpu, bytes, CopyDirection::DeviceToHost));
    entry.last_copy_done = done;
    return done;
}

struct FreeResult {
    std::uint64_t freed_bytes = 0;
    std::uint64_t freed_layers = 0;
    double copy_ready_at = 0;  // latest host-copy completion among freed layers
};

/// Frees the n lowest-indexed device-resident layers (forward order). Bytes
/// become re-usable reserved buffers. Callers must hold the result's
/// copy_ready_at as a stall when it exceeds `now`.
inline FreeResult free_layers_forward_order(ActivationStore& store, MemoryLedger& ledger,
                                            std::uint64_t n, double now) {
    FreeResult res;
    res.copy_ready_at = now;
    for (std::size_t i = 0; i < store.layers.size() && res.freed_layers < n; ++i) {
        auto& l = store.layers[i];
        if (!l.on_device) continue;
        res.copy_ready_at = std::max(res.copy_ready_at, l.last_copy_done);
        ledger.free_bytes(l.recorded_bytes);
        res.freed_bytes += l.recorded_bytes;
        l.on_device = false;
        l.host_bytes = l.recorded_bytes;  // copy completes by copy_ready_at
        ++res.freed_layers;
    }
    return res;
}

struct PrefetchLoad {
    std::uint64_t layer = 0;
    double load_start = 0;
    double load_done = 0;
};

struct PrefetchSchedule {
    std::vector<PrefetchLoad> loads;  // channel order: descending layer index
    std::vector<double> waits;        // per backward step, layer L-1 .. 0
    double total_wait = 0;
};

/// Schedules reverse-order loads for the freed prefix and walks the backward
/// pass against them. Loads are back-to-back on the h2d channel starting at
/// backward_start; backward reaches layer i after the higher layers' steps
/// plus any waits already taken.
inline PrefetchSchedule plan_prefetch(const ActivationStore& store, const GpuProfile& gpu,
                                      double backward_start, double per_layer_backward) {
    PrefetchSchedule sched;
    const std::size_t L = store.layers.size();
    std::vector<double> load_done(L, backward_start);
    std::vector<bool> freed(L, false);
    double channel = backward_start;
    for (std::size_t i = L; i-- > 0;) {
        const auto& l = store.layers[i];
        if (l.on_device || l.consumed || l.dropped || l.recorded_bytes == 0) continue;
        double dur = transfer_time(gpu, l.recorded_bytes, CopyDirection::HostToDevice);
        PrefetchLoad pl;
        pl.layer = i;
        pl.load_start = channel;
        channel += dur;
        pl.load_done = channel;
        load_done[i] = channel;
        freed[i] = true;
        sched.loads.push_back(pl);
    }
    double cursor = backward_start;
    for (std::size_t i = L; i-- > 0;) {
        double wait = freed[i] ? std::max(0.0, load_done[i] - cursor) : 0.0;
        sched.waits.push_back(wait);
        sched.total_wait += wait;
        cursor += wait + per_layer_backward;
    }
    return sched;
}

} // namespace colosim
