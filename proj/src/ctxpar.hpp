#ifndef DV_CTXPAR_HPP
#define DV_CTXPAR_HPP

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "vae.hpp"

// Simulated context parallelism over the frame axis. R ranks each own a
// contiguous chunk of frames and run the same layer stack; every causal conv
// takes its left temporal context from the previous rank's halo message
// instead of from local zero padding, so the sharded run reproduces the
// serial one exactly. Ranks are plain loop iterations (sequential mode) or
// std::threads (threaded mode); the halo bus stands in for the network.

namespace dv {

struct FrameChunk {
    int64_t begin = 0, end = 0;  // [begin, end) in stream frames
    int64_t len() const { return end - begin; }
};

// Rank 0 owns the lone causal frame plus its share of stride-aligned blocks;
// the remaining blocks are split as evenly as possible with earlier ranks
// taking the remainder. Keeping every interior chunk a multiple of `block`
// (the stack's cumulative temporal stride) guarantees each rank still owns a
// non-empty, stride-aligned chunk at every depth of the encoder.
inline std::vector<FrameChunk> split_frames(int64_t frames, int ranks, int64_t block = 4) {
    check(ranks >= 1, "ctxpar: rank count must be positive");
    check(frames >= 1, "ctxpar: frame count must be positive");
    if (ranks == 1) return {{0, frames}};
    check((frames - 1) % block == 0, "ctxpar: frames must be 1 plus a multiple of the chunk block");
    const int64_t blocks = (frames - 1) / block;
    check(blocks >= ranks, "ctxpar: too few frames for rank count");
    std::vector<FrameChunk> plan(ranks);
    int64_t pos = 0;
    for (int r = 0; r < ranks; ++r) {
        int64_t take = blocks / ranks + (r < blocks % ranks ? 1 : 0);
        int64_t len = take * block + (r == 0 ? 1 : 0);
        plan[r] = {pos, pos + len};
        pos += len;
    }
    check(pos == frames, "ctxpar: split does not cover the stream");
    return plan;
}

struct HaloRecord {
    int layer = 0;
    int from_rank = 0, to_rank = 0;
    int64_t frames = 0;    // temporal length of the payload
    int64_t elements = 0;  // total floats moved
};

// In-process stand-in for point-to-point sends between neighboring ranks.
// Messages are keyed by (layer, sender) and consumed FIFO; receive blocks in
// threaded mode and treats an empty queue as a protocol error in sequential
// mode. Each receiver must drain its halos in ascending layer order, which
// catches skipped or duplicated exchanges.
class HaloBus {
public:
    explicit HaloBus(bool blocking) : blocking_(blocking) {}

    void send(int layer, int from_rank, int to_rank, Tensor payload) {
        check(to_rank == from_rank + 1, "ctxpar: halo must flow to the next rank");
        std::lock_guard<std::mutex> lock(mu_);
        log_.push_back({layer, from_rank, to_rank, payload.shape[0], payload.numel()});
        queues_[{layer, from_rank}].push_back(std::move(payload));
        cv_.notify_all();
    }

    Tensor recv(int layer, int from_rank, int64_t want_frames) {
        std::unique_lock<std::mutex> lock(mu_);
        auto& q = queues_[{layer, from_rank}];
        if (blocking_) {
            cv_.wait(lock, [&] { return !q.empty(); });
        } else {
            check(!q.empty(), "ctxpar: missing halo message");
        }
        int receiver = from_rank + 1;
        auto it = last_layer_.find(receiver);
        check(it == last_layer_.end() || layer > it->second,
              "ctxpar: halo received out of order");
        last_layer_[receiver] = layer;
        Tensor payload = std::move(q.front());
        q.pop_front();
        check(payload.shape[0] == want_frames, "ctxpar: halo has wrong temporal length");
        return payload;
    }

    std::vector<HaloRecord> log() const {
        std::lock_guard<std::mutex> lock(mu_);
        return log_;
    }

private:
    bool blocking_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::map<std::pair<int, int>, std::deque<Tensor>> queues_;
    std::map<int, int> last_layer_;  // per receiver, for the ordering check
    std::vector<HaloRecord> log_;
};

namespace detail {

inline Tensor slice_frames(const Tensor& x, int64_t t0, int64_t t1) {
    check(x.rank() == 4 && 0 <= t0 && t0 <= t1 && t1 <= x.shape[0],
          "ctxpar: frame slice out of range");
    Tensor out({t1 - t0, x.shape[1], x.shape[2], x.shape[3]});
    const int64_t stride = x.numel() / x.shape[0];
    std::copy(x.ptr() + t0 * stride, x.ptr() + t1 * stride, out.ptr());
    return out;
}

inline Tensor concat_frames(const Tensor& a, const Tensor& b) {
    check(a.shape[1] == b.shape[1] && a.shape[2] == b.shape[2] && a.shape[3] == b.shape[3],
          "ctxpar: concat frame shape mismatch");
    Tensor out({a.shape[0] + b.shape[0], a.shape[1], a.shape[2], a.shape[3]});
    std::copy(a.ptr(), a.ptr() + a.numel(), out.ptr());
    std::copy(b.ptr(), b.ptr() + b.numel(), out.ptr() + a.numel());
    return out;
}

// One rank's pass over the whole stack. `cs` tracks the global index of the
// chunk's first frame in the current stream; strided convs reassign outputs
// to the rank that owns the window's last input frame, which keeps the
// concatenation of per-rank outputs equal to the serial stream.
inline Tensor run_chunk(const ParamStore& ps, const std::vector<VaeLayer>& layers,
                        const Tensor& input, FrameChunk chunk, int rank, int ranks,
                        HaloBus& bus) {
    int64_t cs = chunk.begin, ce = chunk.end;
    Tensor x = slice_frames(input, cs, ce);
    std::vector<Tensor> skips;
    for (size_t li = 0; li < layers.size(); ++li) {
        const VaeLayer& l = layers[li];
        switch (l.kind) {
            case VaeLayer::kConv: {
                Conv3dSpec spec = l.spec;
                spec.tpad = TemporalPad::kValid;
                const int64_t kt = spec.kt, st = spec.st;
                Tensor ext;
                if (kt > 1) {
                    Tensor halo;
                    if (rank == 0) {
                        halo = Tensor({kt - 1, x.shape[1], x.shape[2], x.shape[3]});
                    } else {
                        halo = bus.recv(static_cast<int>(li), rank - 1, kt - 1);
                        check(halo.shape[1] == x.shape[1] && halo.shape[2] == x.shape[2] &&
                                  halo.shape[3] == x.shape[3],
                              "ctxpar: halo has wrong shape");
                    }
                    ext = concat_frames(halo, x);
                    if (rank + 1 < ranks)
                        bus.send(static_cast<int>(li), rank, rank + 1,
                                 slice_frames(ext, ext.shape[0] - (kt - 1), ext.shape[0]));
                } else {
                    ext = x;
                }
                // Output o reads input frames (o*st - kt, o*st]; it belongs to
                // this rank iff input o*st does.
                const int64_t first_out = (cs + st - 1) / st;
                const int64_t last_out = (ce - 1) / st;
                check(first_out <= last_out, "ctxpar: chunk not aligned to the conv stride");
                const int64_t drop = first_out * st - cs;
                if (drop > 0) ext = slice_frames(ext, drop, ext.shape[0]);
                x = conv3d_forward(ext, ps.at(l.w).value, ps.at(l.b).value, spec);
                check(x.shape[0] == last_out - first_out + 1, "ctxpar: conv output miscount");
                cs = first_out;
                ce = last_out + 1;
                break;
            }
            case VaeLayer::kNorm:
                x = groupnorm_frame_forward(x, l.group_channels, 1e-5f, ps.at(l.gamma).value,
                                            ps.at(l.beta).value);
                break;
            case VaeLayer::kSilu:
                for (int64_t i = 0; i < x.numel(); ++i) x[i] = silu_val(x[i]);
                break;
            case VaeLayer::kPushSkip:
                skips.push_back(x);
                break;
            case VaeLayer::kAddSkip: {
                const Tensor& s = skips.back();
                check(s.numel() == x.numel(), "ctxpar: skip connection shape mismatch");
                for (int64_t i = 0; i < x.numel(); ++i) x[i] += s[i];
                skips.pop_back();
                break;
            }
            default:
                // The temporal upsamplers only appear in the decoder, which
                // stays serial; parallel decode would need the same halo rule
                // applied to frame expansion.
                check(false, "ctxpar: layer kind not supported in chunked mode");
        }
    }
    return x;
}

}  // namespace detail

struct CtxparRun {
    Tensor output;
    std::vector<HaloRecord> halos;
};

// Runs the stack chunked over `ranks` ranks and reassembles the stream. The
// sequential mode walks ranks in order over a non-blocking bus (each halo
// must already be present when requested); the threaded mode runs one thread
// per rank against a blocking bus. Both produce bit-identical output.
inline CtxparRun run_layers_parallel(const ParamStore& ps, const std::vector<VaeLayer>& layers,
                                     const Tensor& input, int ranks, bool threaded,
                                     int64_t block = 4) {
    auto plan = split_frames(input.shape[0], ranks, block);
    HaloBus bus(threaded);
    std::vector<Tensor> parts(ranks);
    if (threaded) {
        std::vector<std::thread> workers;
        workers.reserve(ranks);
        for (int r = 0; r < ranks; ++r)
            workers.emplace_back([&, r] {
                parts[r] = detail::run_chunk(ps, layers, input, plan[r], r, ranks, bus);
            });
        for (auto& w : workers) w.join();
    } else {
        for (int r = 0; r < ranks; ++r)
            parts[r] = detail::run_chunk(ps, layers, input, plan[r], r, ranks, bus);
    }
    CtxparRun run;
    run.output = parts[0];
    for (int r = 1; r < ranks; ++r) run.output = detail::concat_frames(run.output, parts[r]);
    run.halos = bus.log();
    return run;
}

struct CommLine {
    std::string name;       // conv layer name (parameter prefix)
    int64_t kt = 1;
    int64_t elements = 0;   // (ranks-1) * (kt-1) * H * W * Cin
};

// Halo traffic implied by a stack, from shapes alone. `activation_elements`
// counts every layer's output tensor, so `ratio()` reads as "fraction of the
// computed activations that also crosses a rank boundary".
struct CommReport {
    std::vector<CommLine> lines;
    int64_t halo_elements = 0;
    int64_t activation_elements = 0;
    double ratio() const {
        return activation_elements > 0
                   ? static_cast<double>(halo_elements) / static_cast<double>(activation_elements)
                   : 0.0;
    }
};

inline CommReport comm_report(const std::vector<VaeLayer>& layers, int64_t frames, int64_t height,
                              int64_t width, int64_t channels, int ranks) {
    CommReport rep;
    std::vector<int64_t> sh = {frames, height, width, channels};
    for (const VaeLayer& l : layers) {
        switch (l.kind) {
            case VaeLayer::kConv: {
                CommLine line;
                line.name = l.w.substr(0, l.w.size() - 2);  // strip the ".w" suffix
                line.kt = l.spec.kt;
                line.elements = static_cast<int64_t>(ranks - 1) * (l.spec.kt - 1) * sh[1] *
                                sh[2] * sh[3];
                rep.lines.push_back(line);
                rep.halo_elements += line.elements;
                sh = conv3d_out_shape(sh, l.spec);
                break;
            }
            case VaeLayer::kUpTime:
                sh[0] = 2 * sh[0] - 1;
                break;
            case VaeLayer::kUpSpace:
                sh[1] *= 2;
                sh[2] *= 2;
                break;
            case VaeLayer::kPushSkip:
                continue;  // no new tensor
            default:
                break;
        }
        rep.activation_elements += sh[0] * sh[1] * sh[2] * sh[3];
    }
    return rep;
}

}  // namespace dv

#endif  // DV_CTXPAR_HPP
