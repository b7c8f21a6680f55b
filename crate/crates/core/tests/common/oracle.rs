//! Direct evaluation of the deformable cross-attention block with scalar
//! loops. Shares no code with the library beyond reading parameters.

use defxattn::attention::AttentionParams;
use defxattn::ParameterStore;

pub struct Oracle<'a> {
    pub store: &'a ParameterStore,
    pub params: &'a AttentionParams,
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

impl Oracle<'_> {
    fn p(&self, local: &str) -> &[f64] {
        self.store.get(&self.params.name(local)).unwrap().data()
    }

    fn ln(&self, local: &str, x: &[f64]) -> Vec<f64> {
        let c = self.params.channels();
        let g = self.p(&format!("{local}.gamma"));
        let b = self.p(&format!("{local}.beta"));
        let mut out = Vec::with_capacity(x.len());
        for t in 0..x.len() / c {
            let row = &x[t * c..(t + 1) * c];
            let mut mean = 0.0;
            for v in row {
                mean += v;
            }
            mean /= c as f64;
            let mut var = 0.0;
            for v in row {
                var += (v - mean) * (v - mean);
            }
            var /= c as f64;
            for j in 0..c {
                out.push((row[j] - mean) / (var + 1e-5).sqrt() * g[j] + b[j]);
            }
        }
        out
    }

    fn lin(&self, local: &str, x: &[f64], cin: usize, cout: usize) -> Vec<f64> {
        let w = self.p(&format!("{local}.w"));
        let b = self.p(&format!("{local}.b"));
        let mut out = Vec::with_capacity(x.len() / cin * cout);
        for t in 0..x.len() / cin {
            for o in 0..cout {
                let mut acc = b[o];
                for i in 0..cin {
                    acc += x[t * cin + i] * w[i * cout + o];
                }
                out.push(acc);
            }
        }
        out
    }

    /// Offsets `[G, 3·heads]` from the normalized streams.
    fn offsets(&self, grid: [usize; 3], xb_n: &[f64], xr_n: &[f64]) -> Vec<f64> {
        let c = self.params.channels();
        let m = self.params.offset_kernel() as isize;
        let half = m / 2;
        let nh = self.params.heads();
        let dw = self.p("offset.dw.w");
        let dwb = self.p("offset.dw.b");
        let pw = self.p("offset.pw.w");
        let pwb = self.p("offset.pw.b");
        let [g0, g1, g2] = grid.map(|v| v as isize);
        let n = (g0 * g1 * g2) as usize;
        let idx = |x: isize, y: isize, z: isize| ((x * g1 + y) * g2 + z) as usize;
        let mut hidden = vec![0.0; n * c];
        for x in 0..g0 {
            for y in 0..g1 {
                for z in 0..g2 {
                    for ch in 0..c {
                        let mut acc = dwb[ch];
                        for kx in 0..m {
                            for ky in 0..m {
                                for kz in 0..m {
                                    let (ix, iy, iz) = (x + kx - half, y + ky - half, z + kz - half);
                                    if ix < 0 || iy < 0 || iz < 0 || ix >= g0 || iy >= g1 || iz >= g2 {
                                        continue;
                                    }
                                    let t = idx(ix, iy, iz);
                                    let s = xb_n[t * c + ch] + xr_n[t * c + ch];
                                    acc += dw[((ch * m as usize + kx as usize) * m as usize + ky as usize)
                                        * m as usize
                                        + kz as usize]
                                        * s;
                                }
                            }
                        }
                        hidden[idx(x, y, z) * c + ch] = gelu(acc);
                    }
                }
            }
        }
        let mut out = vec![0.0; n * 3 * nh];
        for t in 0..n {
            for o in 0..3 * nh {
                let mut acc = pwb[o];
                for ch in 0..c {
                    acc += pw[o * c + ch] * hidden[t * c + ch];
                }
                out[t * 3 * nh + o] = acc;
            }
        }
        out
    }

    /// Block output for `x_b`, `x_r` of shape `[grid, C]`, windows `win`,
    /// cyclic shift `shift`. The grid must be a multiple of the window.
    pub fn dw_mca(
        &self,
        grid: [usize; 3],
        win: [usize; 3],
        shift: [usize; 3],
        x_b: &[f64],
        x_r: &[f64],
        deformable: bool,
    ) -> Vec<f64> {
        let c = self.params.channels();
        let nh = self.params.heads();
        let dk = c / nh;
        let n = grid[0] * grid[1] * grid[2];
        let xb_n = self.ln("norm_b", x_b);
        let xr_n = self.ln("norm_r", x_r);
        let k = self.lin("k", &xb_n, c, c);
        let v = self.lin("v", &xb_n, c, c);
        let q = self.lin("q", &xr_n, c, c);
        let dp = if deformable {
            self.offsets(grid, &xb_n, &xr_n)
        } else {
            vec![0.0; n * 3 * nh]
        };

        let flat = |g: [usize; 3]| (g[0] * grid[1] + g[1]) * grid[2] + g[2];
        // Position q of the rolled frame holds grid token (q + shift) mod grid.
        let token_at = |qc: [usize; 3]| flat([0, 1, 2].map(|a| (qc[a] + shift[a]) % grid[a]));
        let region = |a: usize, qa: usize| -> usize {
            if shift[a] == 0 || qa < grid[a] - win[a] {
                0
            } else if qa < grid[a] - shift[a] {
                1
            } else {
                2
            }
        };
        let sample = |p: [f64; 3], ch0: usize| -> Vec<f64> {
            let mut lo = [0usize; 3];
            let mut fr = [0f64; 3];
            for a in 0..3 {
                let top = (grid[a] - 1) as f64;
                let pc = p[a].max(0.0).min(top);
                let mut i = pc.floor() as usize;
                if grid[a] > 1 && i == grid[a] - 1 {
                    i -= 1;
                }
                lo[a] = i;
                fr[a] = if grid[a] == 1 { 0.0 } else { pc - i as f64 };
            }
            let mut out = vec![0.0; dk];
            for corner in 0..8 {
                let mut w = 1.0;
                let mut qc = [0usize; 3];
                for a in 0..3 {
                    let up = (corner >> (2 - a)) & 1 == 1;
                    w *= if up { fr[a] } else { 1.0 - fr[a] };
                    qc[a] = if up { (lo[a] + 1).min(grid[a] - 1) } else { lo[a] };
                }
                let t = token_at(qc);
                for j in 0..dk {
                    out[j] += w * q[t * c + ch0 + j];
                }
            }
            out
        };

        let counts = [0, 1, 2].map(|a| grid[a] / win[a]);
        let mut att = vec![0.0; n * c];
        for wx in 0..counts[0] {
            for wy in 0..counts[1] {
                for wz in 0..counts[2] {
                    let mut slots = Vec::new();
                    for sx in 0..win[0] {
                        for sy in 0..win[1] {
                            for sz in 0..win[2] {
                                slots.push([wx * win[0] + sx, wy * win[1] + sy, wz * win[2] + sz]);
                            }
                        }
                    }
                    let label = |qc: [usize; 3]| region(0, qc[0]) * 9 + region(1, qc[1]) * 3 + region(2, qc[2]);
                    for h in 0..nh {
                        let ch0 = h * dk;
                        for &qs in &slots {
                            let tq = token_at(qs);
                            let d = &dp[tq * 3 * nh + 3 * h..tq * 3 * nh + 3 * h + 3];
                            let p = [0, 1, 2].map(|a| qs[a] as f64 + d[a]);
                            let qv = sample(p, ch0);
                            let mut scores = Vec::new();
                            for &ks in &slots {
                                if label(ks) != label(qs) {
                                    continue;
                                }
                                let tk = token_at(ks);
                                let mut s = 0.0;
                                for j in 0..dk {
                                    s += qv[j] * k[tk * c + ch0 + j];
                                }
                                scores.push((tk, s / (dk as f64).sqrt()));
                            }
                            let mx = scores.iter().map(|s| s.1).fold(f64::MIN, f64::max);
                            let z: f64 = scores.iter().map(|s| (s.1 - mx).exp()).sum();
                            for j in 0..dk {
                                let mut acc = 0.0;
                                for &(tk, s) in &scores {
                                    acc += (s - mx).exp() / z * v[tk * c + ch0 + j];
                                }
                                att[tq * c + ch0 + j] = acc;
                            }
                        }
                    }
                }
            }
        }
        let proj = self.lin("proj", &att, c, c);
        let x: Vec<f64> = (0..n * c).map(|i| x_b[i] + proj[i]).collect();
        let hd = c * self.params.mlp_ratio();
        let h = self.ln("norm_mlp", &x);
        let h: Vec<f64> = self.lin("mlp.fc1", &h, c, hd).into_iter().map(gelu).collect();
        let h = self.lin("mlp.fc2", &h, hd, c);
        (0..n * c).map(|i| x[i] + h[i]).collect()
    }
}
