//! Brute-force event-trace oracle for the fork-join graph under the
//! clustering policy. It shares no code with the library beyond the
//! profile type: command lists are derived directly from the graph shape,
//! and every step rescans the whole state.

use cqsched_core::{DeviceType, Millis, Platform};
use num_rational::BigRational;
use num_traits::One;

const BYTES: i64 = 16 * 4;

fn producers(k: u32) -> [Option<u32>; 2] {
    match k {
        1 | 2 => [Some(0), None],
        3 => [Some(1), Some(2)],
        _ => [None, None],
    }
}

fn consumers(k: u32) -> &'static [u32] {
    match k {
        0 => &[1, 2],
        1 | 2 => &[3],
        _ => &[],
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Kind {
    Write,
    Ndrange,
    Read,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum St {
    Pending,
    Waiting,
    Running,
    Done,
}

struct Cmd {
    kind: Kind,
    kernel: u32,
    callback: bool,
    st: St,
    start: Millis,
    finish: Option<Millis>,
    remaining: Millis,
    ready: Millis,
}

struct Comp {
    kernels: Vec<u32>,
    dev: DeviceType,
    device: u32,
    rank: Millis,
    front_ext: Vec<u32>,
    queues: Vec<Vec<usize>>,
    dispatch: Option<usize>,
    done: bool,
}

enum Note {
    Callback(usize),
    Completed(usize),
}

pub struct Oracle<'a> {
    platform: &'a Platform,
    mapping: [DeviceType; 4],
    delay: Millis,
    now: Millis,
    cmds: Vec<Cmd>,
    comps: Vec<Comp>,
    order: Vec<usize>,
    busy: [bool; 2],
    finished: [bool; 4],
    notes: Vec<(Millis, u64, Note)>,
    seq: u64,
}

fn device_of(t: DeviceType) -> u32 {
    match t {
        DeviceType::Cpu => 0,
        DeviceType::Gpu => 1,
    }
}

impl<'a> Oracle<'a> {
    pub fn new(mapping: [DeviceType; 4], platform: &'a Platform, delay: Millis) -> Self {
        let groups: Vec<Vec<u32>> = if mapping[1] == mapping[2] {
            vec![vec![0], vec![1, 2], vec![3]]
        } else {
            vec![vec![0], vec![1], vec![2], vec![3]]
        };
        let time = |k: u32| platform.time(k, device_of(mapping[k as usize])).unwrap().clone();
        let mut rank = [Millis::zero(), Millis::zero(), Millis::zero(), Millis::zero()];
        for k in (0..4u32).rev() {
            let tail = consumers(k).iter().map(|c| rank[*c as usize].clone()).max().unwrap_or_default();
            rank[k as usize] = time(k) + tail;
        }
        let mut o = Oracle {
            platform,
            mapping,
            delay,
            now: Millis::zero(),
            cmds: Vec::new(),
            comps: Vec::new(),
            order: Vec::new(),
            busy: [false; 2],
            finished: [false; 4],
            notes: Vec::new(),
            seq: 0,
        };
        for g in groups {
            let inside = |k: u32| g.contains(&k);
            let dev = mapping[g[0] as usize];
            let front: Vec<u32> =
                g.iter().copied().filter(|k| producers(*k).iter().flatten().any(|p| !inside(*p))).collect();
            let ext: Vec<u32> = g.iter().flat_map(|k| producers(*k)).flatten().filter(|p| !inside(*p)).collect();
            let over = if front.is_empty() { &g } else { &front };
            let crank = over.iter().map(|k| rank[*k as usize].clone()).max().unwrap();
            let mut queues = vec![Vec::new(), Vec::new()];
            for (i, &k) in g.iter().enumerate() {
                let q = i % 2;
                let mut push = |o: &mut Oracle, kind: Kind, callback: bool| {
                    o.cmds.push(Cmd {
                        kind,
                        kernel: k,
                        callback,
                        st: St::Pending,
                        start: Millis::zero(),
                        finish: None,
                        remaining: Millis::zero(),
                        ready: Millis::zero(),
                    });
                    queues[q].push(o.cmds.len() - 1);
                };
                for p in producers(k).iter().flatten() {
                    if !inside(*p) {
                        push(&mut o, Kind::Write, false);
                    }
                }
                for p in producers(k) {
                    if p.is_none() {
                        push(&mut o, Kind::Write, false);
                    }
                }
                let outward = consumers(k).iter().any(|c| !inside(*c));
                push(&mut o, Kind::Ndrange, outward && dev == DeviceType::Cpu);
                if consumers(k).is_empty() {
                    push(&mut o, Kind::Read, false);
                }
                if outward {
                    push(&mut o, Kind::Read, dev == DeviceType::Gpu);
                }
            }
            o.comps.push(Comp {
                kernels: g.clone(),
                dev,
                device: device_of(dev),
                rank: crank,
                front_ext: ext,
                queues,
                dispatch: None,
                done: false,
            });
        }
        o
    }

    fn host_round(&mut self) {
        loop {
            let mut cands: Vec<usize> = (0..self.comps.len())
                .filter(|&c| self.comps[c].dispatch.is_none())
                .filter(|&c| self.comps[c].front_ext.iter().all(|p| self.finished[*p as usize]))
                .collect();
            cands.sort_by(|a, b| self.comps[*b].rank.cmp(&self.comps[*a].rank).then(a.cmp(b)));
            let Some(c) = cands.into_iter().find(|c| !self.busy[self.comps[*c].device as usize]) else { return };
            self.busy[self.comps[c].device as usize] = true;
            self.comps[c].dispatch = Some(self.order.len());
            self.order.push(c);
            self.start_ready();
        }
    }

    fn key(&self, i: usize) -> (u32, usize, usize, usize) {
        for &c in &self.order {
            for (q, cmds) in self.comps[c].queues.iter().enumerate() {
                if let Some(p) = cmds.iter().position(|x| *x == i) {
                    return (self.comps[c].device, self.comps[c].dispatch.unwrap(), q, p);
                }
            }
        }
        unreachable!()
    }

    fn start_ready(&mut self) {
        for &c in &self.order.clone() {
            for q in 0..2 {
                let queue = self.comps[c].queues[q].clone();
                let Some(&head) = queue.iter().find(|i| self.cmds[**i].st != St::Done) else { continue };
                if self.cmds[head].st != St::Pending {
                    continue;
                }
                let dev = self.comps[c].dev;
                let device = self.comps[c].device;
                let cmd = &mut self.cmds[head];
                match (cmd.kind, dev) {
                    (Kind::Ndrange, _) => {
                        cmd.st = St::Running;
                        cmd.start = self.now.clone();
                        cmd.remaining = self.platform.time(cmd.kernel, device).unwrap().clone();
                    }
                    (_, DeviceType::Cpu) => {
                        cmd.st = St::Running;
                        cmd.start = self.now.clone();
                        cmd.finish = Some(self.now.clone());
                    }
                    (_, DeviceType::Gpu) => {
                        cmd.st = St::Waiting;
                        cmd.ready = self.now.clone();
                    }
                }
            }
        }
        let gpu = self.platform.device(1).unwrap();
        let on_channel =
            self.cmds.iter().filter(|c| c.kind != Kind::Ndrange && c.st == St::Running && self.gpu_cmd(c)).count();
        let mut free = gpu.copy_channels as usize - on_channel;
        let mut waiting: Vec<usize> = (0..self.cmds.len()).filter(|i| self.cmds[*i].st == St::Waiting).collect();
        waiting.sort_by(|a, b| {
            let (ka, kb) = (self.key(*a), self.key(*b));
            self.cmds[*a].ready.cmp(&self.cmds[*b].ready).then((ka.1, ka.2, ka.3).cmp(&(kb.1, kb.2, kb.3)))
        });
        let lasting =
            &gpu.transfer_latency + &Millis::from_rational(BigRational::from_integer(BYTES.into()) / &gpu.bandwidth);
        for i in waiting {
            if free == 0 {
                break;
            }
            free -= 1;
            let cmd = &mut self.cmds[i];
            cmd.st = St::Running;
            cmd.start = self.now.clone();
            cmd.finish = Some(&self.now + &lasting);
        }
    }

    fn gpu_cmd(&self, c: &Cmd) -> bool {
        self.mapping[c.kernel as usize] == DeviceType::Gpu
    }

    fn rate(&self, device: u32) -> BigRational {
        let sigma: BigRational = self
            .cmds
            .iter()
            .filter(|c| c.kind == Kind::Ndrange && c.st == St::Running)
            .filter(|c| device_of(self.mapping[c.kernel as usize]) == device)
            .map(|c| self.platform.share(c.kernel, device))
            .sum();
        if sigma > BigRational::one() {
            sigma.recip()
        } else {
            BigRational::one()
        }
    }

    fn finish_of(&self, i: usize) -> Millis {
        let c = &self.cmds[i];
        match &c.finish {
            Some(f) => f.clone(),
            None => {
                let d = device_of(self.mapping[c.kernel as usize]);
                &self.now + &(&c.remaining / &Millis::from_rational(self.rate(d)))
            }
        }
    }

    fn advance(&mut self, t: &Millis) {
        let dt = t - &self.now;
        let rates = [self.rate(0), self.rate(1)];
        for c in &mut self.cmds {
            if c.kind == Kind::Ndrange && c.st == St::Running {
                let d = device_of(self.mapping[c.kernel as usize]) as usize;
                c.remaining = &c.remaining - &(&dt * &Millis::from_rational(rates[d].clone()));
            }
        }
        self.now = t.clone();
    }

    fn comp_of(&self, i: usize) -> usize {
        (0..self.comps.len()).find(|c| self.comps[*c].queues.iter().flatten().any(|x| *x == i)).unwrap()
    }

    /// Runs to completion and returns the makespan.
    pub fn makespan(mut self) -> Millis {
        loop {
            self.host_round();
            if self.comps.iter().all(|c| c.done) {
                break;
            }
            let running: Vec<usize> = (0..self.cmds.len()).filter(|i| self.cmds[*i].st == St::Running).collect();
            let t_sim = running.iter().map(|i| self.finish_of(*i)).min();
            let t_note = self.notes.iter().map(|n| n.0.clone()).min();
            match (t_sim, t_note) {
                (Some(ts), tn) if tn.as_ref().is_none_or(|n| ts <= *n) => {
                    let i =
                        *running.iter().filter(|i| self.finish_of(**i) == ts).min_by_key(|i| self.key(**i)).unwrap();
                    self.advance(&ts);
                    let c = &mut self.cmds[i];
                    c.st = St::Done;
                    c.finish = Some(ts.clone());
                    let comp = self.comp_of(i);
                    let at = &ts + &self.delay;
                    self.seq += 1;
                    if self.cmds[i].callback {
                        self.notes.push((at.clone(), self.seq, Note::Callback(i)));
                        self.seq += 1;
                    }
                    if self.comps[comp].queues.iter().flatten().all(|x| self.cmds[*x].st == St::Done) {
                        self.notes.push((at, self.seq, Note::Completed(comp)));
                    }
                    self.start_ready();
                }
                (_, Some(tn)) => {
                    self.advance(&tn);
                    let j = (0..self.notes.len())
                        .min_by(|a, b| {
                            (&self.notes[*a].0, self.notes[*a].1).cmp(&(&self.notes[*b].0, self.notes[*b].1))
                        })
                        .unwrap();
                    let (_, _, note) = self.notes.remove(j);
                    match note {
                        Note::Callback(i) => self.finished[self.cmds[i].kernel as usize] = true,
                        Note::Completed(c) => {
                            for k in self.comps[c].kernels.clone() {
                                self.finished[k as usize] = true;
                            }
                            self.comps[c].done = true;
                            self.busy[self.comps[c].device as usize] = false;
                        }
                    }
                }
                _ => panic!("oracle stalled"),
            }
        }
        let start = self.cmds.iter().map(|c| c.start.clone()).min().unwrap();
        let end = self.cmds.iter().filter_map(|c| c.finish.clone()).max().unwrap();
        end - start
    }
}
