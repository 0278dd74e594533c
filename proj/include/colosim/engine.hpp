#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <optional>
#include <queue>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "colosim/cost_model.hpp"
#include "colosim/maps.hpp"
#include "colosim/memory.hpp"
#include "colosim/metrics.hpp"
#include "colosim/profiles.hpp"
#include "colosim/workload.hpp"

namespace colosim {

enum class SimMode { Colocated, SeparateCluster, ServingOnly };

inline const char* to_string(SimMode m) {
    switch (m) {
        case SimMode::Colocated: return "colocated";
        case SimMode::SeparateCluster: return "baseline";
        case SimMode::ServingOnly: return "serving-only";
    }
    return "?";
}

inline SimMode sim_mode_from_string(const std::string& s) {
    if (s == "colocated") return SimMode::Colocated;
    if (s == "baseline") return SimMode::SeparateCluster;
    if (s == "serving-only") return SimMode::ServingOnly;
    throw std::runtime_error("unknown sim mode: " + s);
}

/// A broken internal invariant (the ledger overflowing after a map decision
/// was applied) is a bug signal, not a data point; it aborts the run.
struct InvariantBreach : std::runtime_error {
    InvariantBreach(const std::string& what, double sim_time)
        : std::runtime_error(what + " at simulated time " + std::to_string(sim_time)) {}
};

struct SimConfig {
    SimMode mode = SimMode::Colocated;
    TrainingMode training = TrainingMode::CPA;
    ModelProfile model;
    GpuProfile gpu;
    OffloadingMap offload_map;  // consulted in Colocated mode only
    HedgingMap hedge_map;
    double cache_timeout = 60.0;
    Trace trace;
    std::uint64_t seed = 0;
    bool collect_events = false;

    void validate() const {
        validate_profile_pair(model, gpu);
        if (mode == SimMode::Colocated) {
            std::uint64_t h = profile_hash(model, gpu);
            if (offload_map.profile_hash_value != h || hedge_map.profile_hash_value != h)
                throw std::runtime_error("sim config: map profile hash does not match the profiles");
            if (offload_map.mode != training || hedge_map.mode != training)
                throw std::runtime_error("sim config: map training mode does not match sim.training");
        }
        std::uint64_t budget = gpu.capacity_bytes - gpu.runtime_reserve_bytes - model.weights_bytes;
        for (const auto& r : trace.records) {
            if (serving_memory(model, r.prompt_tokens + r.output_tokens, 1) > budget)
                throw std::runtime_error("sim config: query " + std::to_string(r.query_id) +
                                         " cannot fit the device even when served alone");
        }
    }
};

enum class EventKind {
    QueryArrival,
    PrefillDone,
    DecodeStepDone,
    QueryDone,
    LabelArrival,
    CacheTimeout,
    TrainingResume,
    BackwardLayerDone,
    ForwardLayerDone,
    LoadDone,
    CopyDone,
};

inline const char* to_string(EventKind k) {
    switch (k) {
        case EventKind::QueryArrival: return "QueryArrival";
        case EventKind::PrefillDone: return "PrefillDone";
        case EventKind::DecodeStepDone: return "DecodeStepDone";
        case EventKind::QueryDone: return "QueryDone";
        case EventKind::LabelArrival: return "LabelArrival";
        case EventKind::CacheTimeout: return "CacheTimeout";
        case EventKind::TrainingResume: return "TrainingResume";
        case EventKind::BackwardLayerDone: return "BackwardLayerDone";
        case EventKind::ForwardLayerDone: return "ForwardLayerDone";
        case EventKind::LoadDone: return "LoadDone";
        case EventKind::CopyDone: return "CopyDone";
    }
    return "?";
}

/// Audit record of a handled event. Compute records carry [start, start+dur]
/// busy intervals; `lane` separates serving compute (s), colocated training
/// compute (t), the baseline trainer cluster (r) and transfers (x).
struct LoggedEvent {
    double time = 0;
    std::uint64_t seq = 0;
    EventKind kind{};
    std::int64_t a = 0, b = 0;
    double start = 0, dur = 0;
    char lane = '-';

    std::string to_json() const {
        char buf[288];
        std::snprintf(buf, sizeof(buf),
                      "{\"t\":%.9f,\"seq\":%llu,\"kind\":\"%s\",\"a\":%lld,\"b\":%lld,"
                      "\"start\":%.9f,\"dur\":%.9f,\"lane\":\"%c\"}",
                      time, static_cast<unsigned long long>(seq), to_string(kind),
                      static_cast<long long>(a), static_cast<long long>(b), start, dur, lane);
        return buf;
    }
};

class Simulation {
  public:
    explicit Simulation(SimConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        device_.capacity = cfg_.gpu.capacity_bytes;
        trainer_device_.capacity = cfg_.gpu.capacity_bytes;
        for (const auto& r : cfg_.trace.records) record_index_[r.query_id] = &r;
    }

    MetricsReport run() {
        std::uint64_t fixed = cfg_.model.weights_bytes + cfg_.gpu.runtime_reserve_bytes;
        if (!device_.try_allocate(fixed)) throw InvariantBreach("weights exceed device capacity", 0);
        if (cfg_.mode == SimMode::SeparateCluster && !trainer_device_.try_allocate(fixed))
            throw InvariantBreach("weights exceed trainer capacity", 0);

        for (const auto& r : cfg_.trace.records)
            schedule(r.arrival_time, EventKind::QueryArrival, static_cast<std::int64_t>(r.query_id));

        while (!heap_.empty()) {
            Scheduled ev = heap_.top();
            heap_.pop();
            now_ = ev.time;
            dispatch(ev);
        }

        report_.training_busy_time = train_busy_;
        report_.trace_hash = cfg_.trace.content_hash();
        report_.mode_tag = std::string(to_string(cfg_.mode)) + "/" + to_string(cfg_.training);
        report_.peak_device_bytes = cfg_.mode == SimMode::SeparateCluster
                                        ? trainer_device_.peak_allocated
                                        : device_.peak_allocated;
        finalize(report_);
        return report_;
    }

    const std::vector<LoggedEvent>& events() const { return log_; }

    std::string events_json() const {
        std::string out;
        for (const auto& e : log_) {
            out += e.to_json();
            out += '\n';
        }
        return out;
    }

  private:
    struct Scheduled {
        double time;
        std::uint64_t seq;
        EventKind kind;
        std::int64_t a, b, c;
        double start, dur;
        bool operator>(const Scheduled& o) const {
            if (time != o.time) return time > o.time;
            return seq > o.seq;
        }
    };

    struct ActiveQuery {
        const QueryRecord* rec = nullptr;
        std::uint64_t emitted = 0;
        double last_token_time = 0;
        std::uint64_t reserved_bytes = 0;
        bool recording = false;
        bool done = false;
    };

    struct TrainingJob {
        std::uint64_t query_id = 0;
        std::uint64_t prompt_tokens = 0;
        std::uint64_t output_tokens = 0;
        enum class Phase { WaitingLabel, Ready, Forward, Backward };
        Phase phase = Phase::WaitingLabel;
        std::vector<std::uint64_t> passes;  // forward passes still to run (token counts)
        std::size_t pass_index = 0;
        std::uint64_t layer_cursor = 0;
        std::vector<std::uint64_t> backward_basis;  // recorded pass sizes backward consumes
        bool passes_include_prompt = false;         // recompute lost the shared prompt KV
        std::int64_t kv_charged_pass = -1;
        std::optional<double> load_wait_since;  // backward blocked on a prefetch load
    };

    /// The single activation-cache slot plus its provenance.
    struct Slot {
        ActivationStore store;
        std::uint64_t source_query = 0;
        std::uint64_t source_prompt_tokens = 0;
        std::uint64_t source_output_tokens = 0;
        std::uint64_t prompt_kv_bytes = 0;  // portion of kv_bytes_held that is the shared prompt KV
        bool query_completed = false;
        explicit Slot(std::uint64_t layers) : store(layers) {}
    };

    struct BaselineJob {
        std::uint64_t prompt_tokens = 0, output_tokens = 0;
        std::vector<std::uint64_t> passes;
        std::size_t pass_index = 0;
        std::uint64_t layer_cursor = 0;
        bool backward = false;
        std::uint64_t footprint = 0;
    };

    // --- scheduling ---------------------------------------------------------

    void schedule(double time, EventKind kind, std::int64_t a = 0, std::int64_t b = 0,
                  std::int64_t c = 0, double start = 0, double dur = 0) {
        heap_.push(Scheduled{time, next_seq_++, kind, a, b, c, start, dur});
    }

    void log(EventKind kind, std::int64_t a, std::int64_t b, double start, double dur, char lane) {
        if (!cfg_.collect_events) return;
        log_.push_back(LoggedEvent{now_, log_seq_++, kind, a, b, start, dur, lane});
    }

    void dispatch(const Scheduled& ev) {
        switch (ev.kind) {
            case EventKind::QueryArrival: on_arrival(ev); break;
            case EventKind::PrefillDone: on_prefill_done(ev); break;
            case EventKind::DecodeStepDone: on_decode_step(ev); break;
            case EventKind::LabelArrival: on_label(ev); break;
            case EventKind::CacheTimeout: on_timeout(ev); break;
            case EventKind::ForwardLayerDone:
            case EventKind::BackwardLayerDone:
                if (ev.b < 0)
                    on_baseline_layer(ev);
                else if (ev.kind == EventKind::ForwardLayerDone)
                    on_forward_layer(ev);
                else
                    on_backward_layer(ev);
                break;
            case EventKind::LoadDone: on_load_done(ev); break;
            case EventKind::CopyDone: on_copy_done(ev); break;
            default: break;
        }
    }

    // --- serving path -------------------------------------------------------

    void on_arrival(const Scheduled& ev) {
        queue_.push_back(record_index_.at(static_cast<std::uint64_t>(ev.a)));
        log(EventKind::QueryArrival, ev.a, 0, now_, 0, '-');
        if (serving_busy_ || training_inflight_) return;
        interrupt_training_wait(true);
        start_serving_batch();
    }

    std::uint64_t serving_budget() const {
        return cfg_.gpu.capacity_bytes - cfg_.gpu.runtime_reserve_bytes - cfg_.model.weights_bytes;
    }

    void start_serving_batch() {
        if (queue_.empty()) {
            serving_busy_ = false;
            try_start_training();
            return;
        }
        serving_busy_ = true;

        // Dynamic batching: everything queued right now, capped so the batch
        // reservation alone can never exceed the device.
        batch_.clear();
        std::uint64_t need_total = 0;
        std::uint64_t max_incoming = 0;
        while (!queue_.empty()) {
            const QueryRecord* r = queue_.front();
            std::uint64_t need = serving_memory(cfg_.model, r->prompt_tokens + r->output_tokens, 1);
            if (!batch_.empty() && need_total + need > serving_budget()) break;
            ActiveQuery q;
            q.rec = r;
            q.reserved_bytes = need;
            batch_.push_back(q);
            need_total += need;
            max_incoming = std::max(max_incoming, r->prompt_tokens + r->output_tokens);
            queue_.pop_front();
        }

        double stall = 0;
        if (cfg_.mode == SimMode::Colocated && store_ && store_->store.device_footprint() > 0)
            stall = apply_offload_decision(max_incoming, batch_.size(), need_total);

        if (!device_.try_allocate(need_total))
            throw InvariantBreach("serving reservation overflows device after offload decision", now_);

        // Cache admission: single-query batches only, one slot.
        bool recording = false;
        if (cfg_.mode == SimMode::Colocated && batch_.size() == 1 && !store_)
            recording = admit_to_store(*batch_[0].rec);
        batch_[0].recording = recording;

        double prefill_start = now_ + stall;
        double dur = 0;
        for (const auto& q : batch_)
            dur += prefill_latency(cfg_.model, q.rec->prompt_tokens, 1, q.recording);
        schedule(prefill_start + dur, EventKind::PrefillDone, 0, 0, 0, prefill_start, dur);

        if (recording) schedule_prefill_recording(prefill_start, dur);
    }

    /// Per-layer activation recording for the eligible query's prefill; the
    /// async copies chase the layer compute through the pass on the d2h lane.
    void schedule_prefill_recording(double prefill_start, double dur) {
        std::uint64_t tokens = store_->source_prompt_tokens;
        std::uint64_t per_layer = tokens * cfg_.model.act_bytes_per_token_per_layer;
        double layer_dur = dur / static_cast<double>(cfg_.model.num_layers);
        store_->store.begin_recording_pass();
        for (std::uint64_t l = 0; l < cfg_.model.num_layers; ++l) {
            double seg_ready = prefill_start + static_cast<double>(l + 1) * layer_dur;
            // streaming is the free-at-record regime: the layer counts as freed
            if (store_->store.stream_to_host && store_->store.layers[l].recorded_bytes == 0)
                ++report_.layers_freed;
            double done = record_activation(store_->store, device_, d2h_, cfg_.gpu, l, per_layer,
                                            seg_ready, store_->store.stream_to_host);
            schedule(done, EventKind::CopyDone, static_cast<std::int64_t>(l),
                     static_cast<std::int64_t>(per_layer),
                     static_cast<std::int64_t>(store_->store.generation), seg_ready,
                     done - seg_ready);
        }
        update_training_peak();
    }

    void on_prefill_done(const Scheduled& ev) {
        log(EventKind::PrefillDone, static_cast<std::int64_t>(batch_.size()), 0, ev.start, ev.dur, 's');
        for (auto& q : batch_) q.last_token_time = now_;
        schedule_decode_step();
    }

    void schedule_decode_step() {
        double dur = 0;
        for (const auto& q : batch_) {
            if (q.done) continue;
            dur += decode_step_latency(cfg_.model, q.rec->prompt_tokens + q.emitted, 1, false);
        }
        schedule(now_ + dur, EventKind::DecodeStepDone, 0, 0, 0, now_, dur);
    }

    void on_decode_step(const Scheduled& ev) {
        log(EventKind::DecodeStepDone, 0, 0, ev.start, ev.dur, 's');
        bool any_alive = false;
        for (auto& q : batch_) {
            if (q.done) continue;
            ++q.emitted;
            report_.tpt_samples.push_back(now_ - q.last_token_time);
            ++report_.generated_tokens;
            q.last_token_time = now_;
            if (q.emitted == q.rec->output_tokens) {
                q.done = true;
                finish_query(q);
            } else {
                any_alive = true;
            }
        }
        if (any_alive)
            schedule_decode_step();
        else
            start_serving_batch();
    }

    void finish_query(ActiveQuery& q) {
        log(EventKind::QueryDone, static_cast<std::int64_t>(q.rec->query_id), 0, now_, 0, '-');
        std::uint64_t release = q.reserved_bytes;
        bool cached = store_ && store_->source_query == q.rec->query_id && !store_->query_completed;
        if (cached) {
            store_->query_completed = true;
            if (cfg_.training == TrainingMode::CPA) {
                // Prompt KV ownership moves from the serving reservation to the slot.
                std::uint64_t kv_keep = kv_bytes(cfg_.model, q.rec->prompt_tokens, 1);
                store_->store.kv_bytes_held += kv_keep;
                store_->prompt_kv_bytes += kv_keep;
                release -= std::min(release, kv_keep);
                update_training_peak();
                if (q.rec->label_delay)
                    schedule(now_ + *q.rec->label_delay, EventKind::LabelArrival,
                             static_cast<std::int64_t>(store_->store.generation),
                             static_cast<std::int64_t>(q.rec->query_id));
            }
        }
        device_.free_bytes(release);

        if (cfg_.mode == SimMode::SeparateCluster) {
            if (cfg_.training == TrainingMode::CPT)
                baseline_enqueue(q.rec->prompt_tokens, q.rec->output_tokens);
            else if (q.rec->label_delay)
                schedule(now_ + *q.rec->label_delay, EventKind::LabelArrival, -1,
                         static_cast<std::int64_t>(q.rec->query_id));
        }
    }

    // --- activation cache ---------------------------------------------------

    bool admit_to_store(const QueryRecord& rec) {
        std::uint64_t charged = rec.prompt_tokens;
        if (cfg_.training == TrainingMode::CPA) charged += 2 * rec.output_tokens;

        store_.emplace(cfg_.model.num_layers);
        store_->source_query = rec.query_id;
        store_->source_prompt_tokens = rec.prompt_tokens;
        store_->source_output_tokens = rec.output_tokens;
        store_->store.mode = cfg_.training;
        store_->store.cached_tokens = charged;
        store_->store.created_at = now_;
        store_->store.generation = ++store_generation_;

        // Streaming pre-commitment: the map marks slots whose footprint can
        // never sit on the device. A direct transient check covers the
        // recording window itself, when the query's own reservation coexists.
        bool stream = false;
        auto cell = cfg_.offload_map.lookup(charged, 1, 1);
        if (!cell) {
            stream = true;
            ++report_.map_fallbacks;
        } else if (cell->action == OffloadAction::AllToHost) {
            stream = true;
        }
        std::uint64_t prompt_acts =
            activation_bytes(cfg_.model, rec.prompt_tokens, cfg_.model.num_layers);
        if (device_.live() + prompt_acts > device_.capacity) stream = true;
        store_->store.stream_to_host = stream;

        job_.emplace();
        job_->query_id = rec.query_id;
        job_->prompt_tokens = rec.prompt_tokens;
        job_->output_tokens = rec.output_tokens;
        if (cfg_.training == TrainingMode::CPT) {
            job_->phase = TrainingJob::Phase::Ready;  // runnable once serving drains
            job_->passes = {};
            job_->backward_basis = {rec.prompt_tokens};
        } else {
            job_->phase = TrainingJob::Phase::WaitingLabel;
            job_->passes = {rec.output_tokens, rec.output_tokens};
            job_->backward_basis = {rec.prompt_tokens, rec.output_tokens, rec.output_tokens};
            schedule(now_ + cfg_.cache_timeout, EventKind::CacheTimeout,
                     static_cast<std::int64_t>(store_->store.generation));
        }
        return true;
    }

    void teardown_store() {
        if (!store_) return;
        for (auto& l : store_->store.layers)
            if (l.on_device) {
                device_.free_bytes(l.recorded_bytes);
                l.on_device = false;
            }
        if (store_->store.kv_bytes_held) device_.free_bytes(store_->store.kv_bytes_held);
        store_.reset();
        job_.reset();
        ++plan_generation_;
    }

    void on_label(const Scheduled& ev) {
        log(EventKind::LabelArrival, ev.a, ev.b, now_, 0, '-');
        if (ev.a < 0) {  // separate-cluster trainer: label releases the job
            const QueryRecord* rec = record_index_.at(static_cast<std::uint64_t>(ev.b));
            baseline_enqueue(rec->prompt_tokens, rec->output_tokens);
            return;
        }
        if (store_ && store_->store.generation == static_cast<std::uint64_t>(ev.a) && job_ &&
            job_->phase == TrainingJob::Phase::WaitingLabel) {
            job_->phase = TrainingJob::Phase::Ready;
            store_->store.label_ready_at = now_;
            try_start_training();
        } else {
            ++report_.labels_dropped;
        }
    }

    void on_timeout(const Scheduled& ev) {
        if (store_ && store_->store.generation == static_cast<std::uint64_t>(ev.a) && job_ &&
            job_->phase == TrainingJob::Phase::WaitingLabel) {
            log(EventKind::CacheTimeout, ev.a, 0, now_, 0, '-');
            ++report_.labels_dropped;
            teardown_store();
        }
    }

    // --- offloader orchestration ---------------------------------------------

    /// Runs right before a serving prefill while the slot holds device bytes:
    /// query the offloading map, consult the hedging map, then either free in
    /// forward order (load-back) or drop everything (recompute). Returns the
    /// copy-stall delay the prefill must absorb.
    double apply_offload_decision(std::uint64_t incoming, std::uint64_t batch_n,
                                  std::uint64_t need_total) {
        std::uint64_t cached = store_->store.cached_tokens;
        auto dec = cfg_.offload_map.lookup(cached, incoming, batch_n);
        bool fallback = !dec;
        if (fallback) {
            ++report_.map_fallbacks;
            dec = OffloadDecision{OffloadAction::AllToHost, 0};
        }
        if (dec->action == OffloadAction::NoAction) return 0;

        std::uint64_t dev_layers = store_->store.device_resident_layers();
        std::uint64_t free_now = dec->action == OffloadAction::AllToHost
                                     ? dev_layers
                                     : std::min<std::uint64_t>(dec->layers, dev_layers);
        std::uint64_t total_freed =
            std::min(store_->store.host_only_pending() + dec->layers_to_free(cfg_.model.num_layers),
                     cfg_.model.num_layers);

        HedgeDecision hedge = HedgeDecision::Recompute;  // forced for uncovered cells
        if (!fallback) {
            auto h = cfg_.hedge_map.lookup(cached, total_freed);
            if (h)
                hedge = *h;
            else
                ++report_.map_fallbacks;
        }

        if (hedge == HedgeDecision::Recompute) {
            drop_for_recompute(need_total);
            return 0;
        }

        ++plan_generation_;  // pending prefetch loads are void; re-planned at resume
        auto res = free_layers_forward_order(store_->store, device_, free_now, now_);
        report_.layers_freed += res.freed_layers;
        if (device_.live() + need_total > device_.capacity) {
            drop_for_recompute(need_total);  // KV corner: freeing layers was not enough
            return 0;
        }
        double stall = std::max(0.0, res.copy_ready_at - now_);
        report_.copy_stall_seconds += stall;
        train_busy_ += stall;
        return stall;
    }

    /// Hedge said recompute: activations are dropped from device and host and
    /// the job restarts its forward passes. The shared prompt KV survives when
    /// it can coexist with the incoming batch; otherwise the recompute also
    /// includes one fresh prompt prefill.
    void drop_for_recompute(std::uint64_t need_total) {
        ++report_.recomputes;
        ++plan_generation_;
        for (auto& l : store_->store.layers) {
            if (l.on_device) {
                device_.free_bytes(l.recorded_bytes);
                l.on_device = false;
            }
            l.dropped = true;  // terminal for this incarnation; redo passes start fresh
            l.recorded_bytes = 0;
            l.host_bytes = 0;
            l.consumed = false;
            l.last_copy_done = 0;
        }
        store_->store.last_recorded_layer = -1;
        // Response-pass KV from any aborted forwards goes too; passes restart.
        std::uint64_t response_kv = store_->store.kv_bytes_held - store_->prompt_kv_bytes;
        if (response_kv) device_.free_bytes(response_kv);
        store_->store.kv_bytes_held = store_->prompt_kv_bytes;

        if (job_) {
            job_->pass_index = 0;
            job_->layer_cursor = 0;
            job_->kv_charged_pass = -1;
            job_->load_wait_since.reset();
            if (job_->phase != TrainingJob::Phase::WaitingLabel)
                job_->phase = TrainingJob::Phase::Ready;
            if (cfg_.training == TrainingMode::CPT) {
                job_->passes = {job_->prompt_tokens};
                job_->backward_basis = {job_->prompt_tokens};
            } else {
                // The prompt is prefilled once and its KV shared across both
                // response passes; a retained prompt KV only spares the
                // re-allocation, not the pass.
                job_->passes_include_prompt = true;
                job_->passes = {job_->prompt_tokens, job_->output_tokens, job_->output_tokens};
                job_->backward_basis = job_->passes;
            }
        }

        // KV corner: the incoming batch may only fit if the slot's KV goes too.
        if (store_->store.kv_bytes_held > 0 && device_.live() + need_total > device_.capacity) {
            device_.free_bytes(store_->store.kv_bytes_held);
            store_->store.kv_bytes_held = 0;
            store_->prompt_kv_bytes = 0;
        }
        update_training_peak();
    }

    // --- training path --------------------------------------------------------

    double per_layer_backward(const TrainingJob& job) const {
        double d = 0;
        for (std::uint64_t b : job.backward_basis) d += backward_layer_latency(cfg_.model, b);
        return d;
    }

    /// A query arriving while backward sits waiting on a prefetch load pauses
    /// the job on the spot; the pending loads are re-planned at resume.
    void interrupt_training_wait(bool count_preemption) {
        if (job_ && job_->load_wait_since) {
            double waited = now_ - *job_->load_wait_since;
            report_.prefetch_wait_seconds += waited;
            train_busy_ += waited;
            job_->load_wait_since.reset();
            if (count_preemption) ++report_.preemptions;
            ++plan_generation_;
        }
    }

    void try_start_training() {
        if (cfg_.mode != SimMode::Colocated || !job_ || serving_busy_ || !queue_.empty() ||
            training_inflight_)
            return;
        switch (job_->phase) {
            case TrainingJob::Phase::WaitingLabel: return;
            case TrainingJob::Phase::Ready:
                log(EventKind::TrainingResume, static_cast<std::int64_t>(job_->query_id), 0, now_, 0, '-');
                if (job_->pass_index < job_->passes.size()) {
                    job_->phase = TrainingJob::Phase::Forward;
                    job_->layer_cursor = 0;
                    begin_pass();
                } else {
                    job_->phase = TrainingJob::Phase::Backward;
                    job_->layer_cursor = cfg_.model.num_layers - 1;
                    start_backward();
                }
                return;
            case TrainingJob::Phase::Forward:
                log(EventKind::TrainingResume, static_cast<std::int64_t>(job_->query_id), 0, now_, 0, '-');
                begin_pass();  // no-op for KV if the pass is already charged
                return;
            case TrainingJob::Phase::Backward:
                log(EventKind::TrainingResume, static_cast<std::int64_t>(job_->query_id), 0, now_, 0, '-');
                start_backward();
                return;
        }
    }

    void begin_pass() {
        charge_pass_kv();
        schedule_forward_layer();
    }

    /// CPA passes carry their own KV (responses, or the prompt when its shared
    /// KV is gone); allocated up front, owned by the slot.
    void charge_pass_kv() {
        if (job_->kv_charged_pass == static_cast<std::int64_t>(job_->pass_index)) return;
        job_->kv_charged_pass = static_cast<std::int64_t>(job_->pass_index);
        store_->store.begin_recording_pass();
        if (cfg_.training != TrainingMode::CPA) return;
        bool is_prompt_pass = job_->passes_include_prompt && job_->pass_index == 0;
        if (is_prompt_pass && store_->prompt_kv_bytes > 0) return;  // shared KV retained
        std::uint64_t tokens = job_->passes[job_->pass_index];
        std::uint64_t kv = kv_bytes(cfg_.model, tokens, 1);
        if (!device_.try_allocate(kv))
            throw InvariantBreach("training pass KV allocation failed", now_);
        store_->store.kv_bytes_held += kv;
        if (is_prompt_pass) store_->prompt_kv_bytes += kv;
        update_training_peak();
    }

    void schedule_forward_layer() {
        double dur = forward_layer_latency(cfg_.model, job_->passes[job_->pass_index]);
        training_inflight_ = true;
        schedule(now_ + dur, EventKind::ForwardLayerDone,
                 static_cast<std::int64_t>(job_->layer_cursor),
                 static_cast<std::int64_t>(job_->pass_index), 0, now_, dur);
    }

    void on_forward_layer(const Scheduled& ev) {
        training_inflight_ = false;
        train_busy_ += ev.dur;
        log(EventKind::ForwardLayerDone, ev.a, ev.b, ev.start, ev.dur, 't');

        std::uint64_t tokens = job_->passes[job_->pass_index];
        std::uint64_t bytes = tokens * cfg_.model.act_bytes_per_token_per_layer;
        if (store_->store.stream_to_host && store_->store.layers[job_->layer_cursor].recorded_bytes == 0)
            ++report_.layers_freed;
        double done = record_activation(store_->store, device_, d2h_, cfg_.gpu, job_->layer_cursor,
                                        bytes, now_, store_->store.stream_to_host);
        schedule(done, EventKind::CopyDone, ev.a, static_cast<std::int64_t>(bytes),
                 static_cast<std::int64_t>(store_->store.generation), now_, done - now_);
        update_training_peak();

        ++job_->layer_cursor;
        if (job_->layer_cursor == cfg_.model.num_layers) {
            ++job_->pass_index;
            job_->layer_cursor = 0;
            if (job_->pass_index >= job_->passes.size()) {
                job_->phase = TrainingJob::Phase::Backward;
                job_->layer_cursor = cfg_.model.num_layers - 1;
                if (!preempt_if_needed()) start_backward();
                return;
            }
            if (!preempt_if_needed()) begin_pass();
            return;
        }
        if (!preempt_if_needed()) schedule_forward_layer();
    }

    /// The per-layer hook: pause whenever serving work is queued.
    bool preempt_if_needed() {
        if (queue_.empty()) return false;
        ++report_.preemptions;
        ++plan_generation_;
        start_serving_batch();
        return true;
    }

    void start_backward() {
        ++plan_generation_;
        bool any_pending = false;
        for (const auto& l : store_->store.layers)
            if (!l.on_device && !l.consumed && !l.dropped && l.recorded_bytes > 0) any_pending = true;
        if (any_pending) {
            PrefetchSchedule plan =
                plan_prefetch(store_->store, cfg_.gpu, now_, per_layer_backward(*job_));
            for (const auto& ld : plan.loads)
                schedule(ld.load_done, EventKind::LoadDone, static_cast<std::int64_t>(ld.layer),
                         static_cast<std::int64_t>(plan_generation_), 0, ld.load_start,
                         ld.load_done - ld.load_start);
        }
        schedule_backward_layer();
    }

    void schedule_backward_layer() {
        const auto& entry = store_->store.layers[job_->layer_cursor];
        if (!entry.on_device) {
            job_->load_wait_since = now_;  // LoadDone resumes the walk
            return;
        }
        double dur = per_layer_backward(*job_);
        training_inflight_ = true;
        schedule(now_ + dur, EventKind::BackwardLayerDone,
                 static_cast<std::int64_t>(job_->layer_cursor), 0, 0, now_, dur);
    }

    void on_backward_layer(const Scheduled& ev) {
        training_inflight_ = false;
        train_busy_ += ev.dur;
        log(EventKind::BackwardLayerDone, ev.a, 0, ev.start, ev.dur, 't');

        auto& entry = store_->store.layers[static_cast<std::size_t>(ev.a)];
        if (entry.on_device) {
            device_.free_bytes(entry.recorded_bytes);
            entry.on_device = false;
        }
        entry.consumed = true;

        if (ev.a == 0) {
            complete_job();
            return;
        }
        job_->layer_cursor = static_cast<std::uint64_t>(ev.a) - 1;
        if (!preempt_if_needed()) schedule_backward_layer();
    }

    void on_load_done(const Scheduled& ev) {
        if (static_cast<std::uint64_t>(ev.b) != plan_generation_) return;  // cancelled plan
        auto& entry = store_->store.layers[static_cast<std::size_t>(ev.a)];
        if (!device_.try_allocate(entry.recorded_bytes))
            throw InvariantBreach("prefetch load allocation failed", now_);
        entry.on_device = true;
        ++report_.loads;
        log(EventKind::LoadDone, ev.a, 0, ev.start, ev.dur, 'x');
        if (job_ && job_->load_wait_since && job_->phase == TrainingJob::Phase::Backward &&
            job_->layer_cursor == static_cast<std::uint64_t>(ev.a) && !serving_busy_ && queue_.empty()) {
            double waited = now_ - *job_->load_wait_since;
            report_.prefetch_wait_seconds += waited;
            train_busy_ += waited;
            job_->load_wait_since.reset();
            schedule_backward_layer();
        }
    }

    void on_copy_done(const Scheduled& ev) {
        if (!store_ || store_->store.generation != static_cast<std::uint64_t>(ev.c)) return;
        auto& entry = store_->store.layers[static_cast<std::size_t>(ev.a)];
        entry.host_bytes =
            std::min(entry.recorded_bytes, entry.host_bytes + static_cast<std::uint64_t>(ev.b));
        log(EventKind::CopyDone, ev.a, ev.b, ev.start, ev.dur, 'x');
    }

    void complete_job() {
        std::uint64_t tokens = job_->prompt_tokens;
        if (cfg_.training == TrainingMode::CPA) tokens += 2 * job_->output_tokens;
        report_.trained_tokens += tokens;
        ++report_.completed_jobs;
        teardown_store();
    }

    void update_training_peak() {
        if (!store_) return;
        std::uint64_t cur = store_->store.kv_bytes_held;
        for (const auto& l : store_->store.layers)
            if (!l.consumed && !l.dropped) cur += l.recorded_bytes;
        report_.peak_training_activation_bytes =
            std::max(report_.peak_training_activation_bytes, cur);
    }

    // --- separate-cluster trainer ----------------------------------------------

    void baseline_enqueue(std::uint64_t prompt, std::uint64_t output) {
        BaselineJob job;
        job.prompt_tokens = prompt;
        job.output_tokens = output;
        if (cfg_.training == TrainingMode::CPT)
            job.passes = {prompt};
        else
            job.passes = {prompt + output, prompt + output};  // no KV sharing: two full passes
        std::uint64_t per_token = cfg_.model.num_layers * cfg_.model.act_bytes_per_token_per_layer +
                                  cfg_.model.kv_bytes_per_token;
        for (std::uint64_t p : job.passes) job.footprint += p * per_token;
        report_.peak_training_activation_bytes =
            std::max(report_.peak_training_activation_bytes, job.footprint);
        std::uint64_t budget =
            trainer_device_.capacity - cfg_.model.weights_bytes - cfg_.gpu.runtime_reserve_bytes;
        if (job.footprint > budget) {
            report_.oom_flag = true;  // reported as a datapoint, not an abort
            ++report_.oom_jobs;
            return;
        }
        bqueue_.push_back(job);
        baseline_try_start();
    }

    void baseline_try_start() {
        if (btrainer_busy_ || bqueue_.empty()) return;
        btrainer_busy_ = true;
        bjob_ = bqueue_.front();
        bqueue_.pop_front();
        if (!trainer_device_.try_allocate(bjob_.footprint))
            throw InvariantBreach("baseline trainer allocation failed after fit check", now_);
        schedule_baseline_layer(std::max(now_, trainer_free_at_));
    }

    void schedule_baseline_layer(double at) {
        double dur;
        EventKind kind;
        if (!bjob_.backward) {
            dur = forward_layer_latency(cfg_.model, bjob_.passes[bjob_.pass_index]);
            kind = EventKind::ForwardLayerDone;
        } else {
            dur = 0;
            for (std::uint64_t p : bjob_.passes) dur += backward_layer_latency(cfg_.model, p);
            kind = EventKind::BackwardLayerDone;
        }
        schedule(at + dur, kind, static_cast<std::int64_t>(bjob_.layer_cursor), -1, 0, at, dur);
    }

    void on_baseline_layer(const Scheduled& ev) {
        train_busy_ += ev.dur;
        trainer_free_at_ = now_;
        log(ev.kind, ev.a, -1, ev.start, ev.dur, 'r');
        if (!bjob_.backward) {
            ++bjob_.layer_cursor;
            if (bjob_.layer_cursor == cfg_.model.num_layers) {
                bjob_.layer_cursor = 0;
                ++bjob_.pass_index;
                if (bjob_.pass_index >= bjob_.passes.size()) {
                    bjob_.backward = true;
                    bjob_.layer_cursor = cfg_.model.num_layers - 1;
                }
            }
            schedule_baseline_layer(now_);
            return;
        }
        if (bjob_.layer_cursor == 0) {
            std::uint64_t tokens = bjob_.prompt_tokens;
            if (cfg_.training == TrainingMode::CPA) tokens += 2 * bjob_.output_tokens;
            report_.trained_tokens += tokens;
            ++report_.completed_jobs;
            trainer_device_.free_bytes(bjob_.footprint);
            btrainer_busy_ = false;
            baseline_try_start();
            return;
        }
        --bjob_.layer_cursor;
        schedule_baseline_layer(now_);
    }

    // --- state ------------------------------------------------------------------

    SimConfig cfg_;
    std::priority_queue<Scheduled, std::vector<Scheduled>, std::greater<Scheduled>> heap_;
    std::uint64_t next_seq_ = 0;
    std::uint64_t log_seq_ = 0;
    double now_ = 0;

    MemoryLedger device_;
    MemoryLedger trainer_device_;
    TransferChannel d2h_;  // prefetch loads are planned per resume, not queued here

    std::unordered_map<std::uint64_t, const QueryRecord*> record_index_;
    std::deque<const QueryRecord*> queue_;
    std::vector<ActiveQuery> batch_;
    bool serving_busy_ = false;

    std::optional<Slot> store_;
    std::optional<TrainingJob> job_;
    bool training_inflight_ = false;
    std::uint64_t store_generation_ = 0;
    std::uint64_t plan_generation_ = 0;
    double train_busy_ = 0;

    std::deque<BaselineJob> bqueue_;
    BaselineJob bjob_;
    bool btrainer_busy_ = false;
    double trainer_free_at_ = 0;

    MetricsReport report_;
    std::vector<LoggedEvent> log_;
};

inline MetricsReport run_simulation(SimConfig cfg) {
    Simulation sim(std::move(cfg));
    return sim.run();
}

} // namespace colosim
