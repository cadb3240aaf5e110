//! Primal network simplex for the dense transportation problem.
//!
//! Spanning-tree bookkeeping (parent, thread, successor counts) follows the
//! classical LEMON layout with an artificial root and block-search pivoting.
//! Real arcs are implicit: arc `e < n1*n2` joins supply `e / n2` to demand
//! `e % n2` and its cost is evaluated on demand. Ties in the pivot and ratio
//! tests go to the lowest index, so results are deterministic.

const STATE_TREE: i8 = 0;
const STATE_LOWER: i8 = 1;
const DIR_UP: i8 = 1;
const DIR_DOWN: i8 = -1;

pub struct TransportSolution {
    pub cost: f64,
    /// (supply index, demand index, flow) for arcs carrying positive flow.
    pub flows: Vec<(usize, usize, f64)>,
}

struct Simplex<'a, C: Fn(usize, usize) -> f64> {
    n1: usize,
    n2: usize,
    node_num: usize,
    arc_num: usize,
    cost_fn: &'a C,
    // Artificial arc endpoints/costs, indexed by node.
    art_source: Vec<usize>,
    art_target: Vec<usize>,
    art_costv: Vec<f64>,
    flow: Vec<f64>,
    state: Vec<i8>,
    pi: Vec<f64>,
    parent: Vec<isize>,
    pred: Vec<usize>,
    thread: Vec<usize>,
    rev_thread: Vec<usize>,
    succ_num: Vec<usize>,
    last_succ: Vec<usize>,
    pred_dir: Vec<i8>,
    dirty_revs: Vec<usize>,
    in_arc: usize,
    join: usize,
    u_in: usize,
    v_in: usize,
    u_out: usize,
    delta: f64,
    next_arc: usize,
    block_size: usize,
    eps: f64,
}

impl<'a, C: Fn(usize, usize) -> f64> Simplex<'a, C> {
    #[inline]
    fn source(&self, e: usize) -> usize {
        if e < self.arc_num {
            e / self.n2
        } else {
            self.art_source[e - self.arc_num]
        }
    }

    #[inline]
    fn target(&self, e: usize) -> usize {
        if e < self.arc_num {
            self.n1 + e % self.n2
        } else {
            self.art_target[e - self.arc_num]
        }
    }

    #[inline]
    fn cost(&self, e: usize) -> f64 {
        if e < self.arc_num {
            (self.cost_fn)(e / self.n2, e % self.n2)
        } else {
            self.art_costv[e - self.arc_num]
        }
    }

    fn new(a: &[f64], b: &[f64], cost_fn: &'a C) -> Self {
        let n1 = a.len();
        let n2 = b.len();
        let node_num = n1 + n2;
        let arc_num = n1 * n2;
        let mut max_cost: f64 = 0.0;
        for i in 0..n1 {
            for j in 0..n2 {
                max_cost = max_cost.max(cost_fn(i, j));
            }
        }
        let art_cost = (max_cost + 1.0) * node_num as f64;
        let all = arc_num + node_num;
        let root = node_num;
        let mut s = Simplex {
            n1,
            n2,
            node_num,
            arc_num,
            cost_fn,
            art_source: vec![0; node_num],
            art_target: vec![0; node_num],
            art_costv: vec![0.0; node_num],
            flow: vec![0.0; all],
            state: vec![STATE_LOWER; all],
            pi: vec![0.0; node_num + 1],
            parent: vec![-1; node_num + 1],
            pred: vec![usize::MAX; node_num + 1],
            thread: vec![0; node_num + 1],
            rev_thread: vec![0; node_num + 1],
            succ_num: vec![0; node_num + 1],
            last_succ: vec![0; node_num + 1],
            pred_dir: vec![0; node_num + 1],
            dirty_revs: Vec::new(),
            in_arc: 0,
            join: 0,
            u_in: 0,
            v_in: 0,
            u_out: 0,
            delta: 0.0,
            next_arc: 0,
            block_size: ((arc_num as f64).sqrt() as usize).max(10),
            eps: 1e-14 * (max_cost + 1.0),
        };
        s.thread[root] = 0;
        s.rev_thread[0] = root;
        s.succ_num[root] = node_num + 1;
        s.last_succ[root] = root - 1;
        for u in 0..node_num {
            let e = arc_num + u;
            let supply = if u < n1 { a[u] } else { -b[u - n1] };
            s.parent[u] = root as isize;
            s.pred[u] = e;
            s.thread[u] = u + 1;
            s.rev_thread[u + 1] = u;
            s.succ_num[u] = 1;
            s.last_succ[u] = u;
            s.state[e] = STATE_TREE;
            if supply >= 0.0 {
                s.pred_dir[u] = DIR_UP;
                s.pi[u] = 0.0;
                s.art_source[u] = u;
                s.art_target[u] = root;
                s.flow[e] = supply;
                s.art_costv[u] = 0.0;
            } else {
                s.pred_dir[u] = DIR_DOWN;
                s.pi[u] = art_cost;
                s.art_source[u] = root;
                s.art_target[u] = u;
                s.flow[e] = -supply;
                s.art_costv[u] = art_cost;
            }
        }
        s
    }

    #[inline]
    fn reduced(&self, e: usize) -> f64 {
        self.state[e] as f64 * (self.cost(e) + self.pi[self.source(e)] - self.pi[self.target(e)])
    }

    fn find_entering_arc(&mut self) -> bool {
        let mut min = -self.eps;
        let mut found = false;
        let mut cnt = self.block_size;
        let total = self.arc_num;
        let mut e = self.next_arc;
        for _ in 0..total {
            // Real arcs only: artificial arcs never re-enter.
            let c = self.reduced(e);
            if c < min {
                min = c;
                self.in_arc = e;
                found = true;
            }
            e += 1;
            if e == total {
                e = 0;
            }
            cnt -= 1;
            if cnt == 0 {
                if found {
                    self.next_arc = e;
                    return true;
                }
                cnt = self.block_size;
            }
        }
        if found {
            self.next_arc = e;
        }
        found
    }

    fn find_join_node(&mut self) {
        let mut u = self.source(self.in_arc);
        let mut v = self.target(self.in_arc);
        while u != v {
            if self.succ_num[u] < self.succ_num[v] {
                u = self.parent[u] as usize;
            } else {
                v = self.parent[v] as usize;
            }
        }
        self.join = u;
    }

    fn find_leaving_arc(&mut self) -> bool {
        let (first, second) = if self.state[self.in_arc] == STATE_LOWER {
            (self.source(self.in_arc), self.target(self.in_arc))
        } else {
            (self.target(self.in_arc), self.source(self.in_arc))
        };
        self.delta = f64::INFINITY;
        let mut result = 0;
        let mut u = first;
        while u != self.join {
            let e = self.pred[u];
            // Uncapacitated arcs: only arcs pointing against the cycle limit the step.
            let d = if self.pred_dir[u] == DIR_DOWN {
                f64::INFINITY
            } else {
                self.flow[e]
            };
            if d < self.delta {
                self.delta = d;
                self.u_out = u;
                result = 1;
            }
            u = self.parent[u] as usize;
        }
        let mut u = second;
        while u != self.join {
            let e = self.pred[u];
            let d = if self.pred_dir[u] == DIR_UP {
                f64::INFINITY
            } else {
                self.flow[e]
            };
            if d <= self.delta {
                self.delta = d;
                self.u_out = u;
                result = 2;
            }
            u = self.parent[u] as usize;
        }
        if result == 1 {
            self.u_in = first;
            self.v_in = second;
        } else {
            self.u_in = second;
            self.v_in = first;
        }
        result != 0
    }

    fn change_flow(&mut self, change: bool) {
        if self.delta > 0.0 {
            let val = self.state[self.in_arc] as f64 * self.delta;
            self.flow[self.in_arc] += val;
            let mut u = self.source(self.in_arc);
            while u != self.join {
                let e = self.pred[u];
                self.flow[e] -= self.pred_dir[u] as f64 * val;
                u = self.parent[u] as usize;
            }
            let mut u = self.target(self.in_arc);
            while u != self.join {
                let e = self.pred[u];
                self.flow[e] += self.pred_dir[u] as f64 * val;
                u = self.parent[u] as usize;
            }
        }
        if change {
            self.state[self.in_arc] = STATE_TREE;
            let out = self.pred[self.u_out];
            // Clean round-off on the arc leaving the basis.
            self.flow[out] = 0.0;
            self.state[out] = STATE_LOWER;
        } else {
            self.state[self.in_arc] = -self.state[self.in_arc];
        }
    }

    fn update_tree_structure(&mut self) {
        let u_in = self.u_in;
        let v_in = self.v_in;
        let u_out = self.u_out;
        let in_arc = self.in_arc;
        let old_rev_thread = self.rev_thread[u_out];
        let old_succ_num = self.succ_num[u_out];
        let old_last_succ = self.last_succ[u_out];
        let v_out = self.parent[u_out] as usize;

        if u_in == u_out {
            self.parent[u_in] = v_in as isize;
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = if u_in == self.source(in_arc) {
                DIR_UP
            } else {
                DIR_DOWN
            };
            if self.thread[v_in] != u_out {
                let mut after = self.thread[old_last_succ];
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
                after = self.thread[v_in];
                self.thread[v_in] = u_out;
                self.rev_thread[u_out] = v_in;
                self.thread[old_last_succ] = after;
                self.rev_thread[after] = old_last_succ;
            }
        } else {
            let thread_continue = if old_rev_thread == v_in {
                self.thread[old_last_succ]
            } else {
                self.thread[v_in]
            };
            let mut stem = u_in;
            let mut par_stem = v_in;
            let mut last = self.last_succ[u_in];
            let mut after = self.thread[last];
            self.thread[v_in] = u_in;
            self.dirty_revs.clear();
            self.dirty_revs.push(v_in);
            while stem != u_out {
                let next_stem = self.parent[stem] as usize;
                self.thread[last] = next_stem;
                self.dirty_revs.push(last);
                let before = self.rev_thread[stem];
                self.thread[before] = after;
                self.rev_thread[after] = before;
                self.parent[stem] = par_stem as isize;
                par_stem = stem;
                stem = next_stem;
                last = if self.last_succ[stem] == self.last_succ[par_stem] {
                    self.rev_thread[par_stem]
                } else {
                    self.last_succ[stem]
                };
                after = self.thread[last];
            }
            self.parent[u_out] = par_stem as isize;
            self.thread[last] = thread_continue;
            self.rev_thread[thread_continue] = last;
            self.last_succ[u_out] = last;
            if old_rev_thread != v_in {
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
            }
            for k in 0..self.dirty_revs.len() {
                let u = self.dirty_revs[k];
                let t = self.thread[u];
                self.rev_thread[t] = u;
            }
            let mut tmp_sc = 0usize;
            let tmp_ls = self.last_succ[u_out];
            let mut u = u_out;
            while u != u_in {
                let p = self.parent[u] as usize;
                self.pred[u] = self.pred[p];
                self.pred_dir[u] = -self.pred_dir[p];
                tmp_sc = tmp_sc + self.succ_num[u] - self.succ_num[p];
                self.succ_num[u] = tmp_sc;
                self.last_succ[p] = tmp_ls;
                u = p;
            }
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = if u_in == self.source(in_arc) {
                DIR_UP
            } else {
                DIR_DOWN
            };
            self.succ_num[u_in] = old_succ_num;
        }

        let join = self.join;
        let up_limit_out: isize = if self.last_succ[join] == v_in {
            join as isize
        } else {
            -1
        };
        let last_succ_out = self.last_succ[u_out];
        let mut u = v_in as isize;
        while u != -1 && self.last_succ[u as usize] == v_in {
            self.last_succ[u as usize] = last_succ_out;
            u = self.parent[u as usize];
        }
        if join != old_rev_thread && v_in != old_rev_thread {
            let mut u = v_out as isize;
            while u != up_limit_out && self.last_succ[u as usize] == old_last_succ {
                self.last_succ[u as usize] = old_rev_thread;
                u = self.parent[u as usize];
            }
        } else if last_succ_out != old_last_succ {
            let mut u = v_out as isize;
            while u != up_limit_out && self.last_succ[u as usize] == old_last_succ {
                self.last_succ[u as usize] = last_succ_out;
                u = self.parent[u as usize];
            }
        }
        let mut u = v_in;
        while u != join {
            self.succ_num[u] += old_succ_num;
            u = self.parent[u] as usize;
        }
        let mut u = v_out;
        while u != join {
            self.succ_num[u] -= old_succ_num;
            u = self.parent[u] as usize;
        }
    }

    fn update_potential(&mut self) {
        let u_in = self.u_in;
        let sigma = self.pi[self.v_in]
            - self.pi[u_in]
            - self.pred_dir[u_in] as f64 * self.cost(self.in_arc);
        let end = self.thread[self.last_succ[u_in]];
        let mut u = u_in;
        while u != end {
            self.pi[u] += sigma;
            u = self.thread[u];
        }
    }

    fn run(&mut self) {
        let max_iter = 100 * (self.arc_num + self.node_num) + 1000;
        let mut it = 0;
        while self.find_entering_arc() {
            self.find_join_node();
            let change = self.find_leaving_arc();
            self.change_flow(change);
            if change {
                self.update_tree_structure();
                self.update_potential();
            }
            it += 1;
            if it > max_iter {
                break;
            }
        }
    }
}

/// Solves min Σ c(i,j) π_ij subject to row sums a and column sums b.
pub fn solve_transport<C: Fn(usize, usize) -> f64>(
    a: &[f64],
    b: &[f64],
    cost: &C,
) -> TransportSolution {
    let mut s = Simplex::new(a, b, cost);
    s.run();
    let mut flows = Vec::new();
    let mut total = 0.0;
    for e in 0..s.arc_num {
        let f = s.flow[e];
        if f > 0.0 {
            let (i, j) = (e / s.n2, e % s.n2);
            total += f * cost(i, j);
            flows.push((i, j, f));
        }
    }
    TransportSolution { cost: total, flows }
}
