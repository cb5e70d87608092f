//! Prediction-time dropout queries, the attack channel.
//!
//! Each query draws one Bernoulli mask per dropout-enabled hidden layer, in layer order, from
//! the stream registered for its stream id, then runs the network. Because draw consumption per
//! query is fixed, an adversary who knows the master seed and the query count can replay the
//! stream offline ([`predict_activation_query`]) or pad it so that the next query fires the
//! backdoor ([`schedule_dos`]).

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::dropout::{all_targets_dropped, DropoutPlan, LayerTargets, Mask, RngStream, StreamState};
use crate::error::{contract, Error, Result};
use crate::network::{first_hidden_activation, posteriors_from_first_activation, ModelSpec, Parameters};
use crate::numeric::{argmax_tiebreak_low, Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    /// 1-based position of this query on its stream.
    pub query_index: u64,
    pub posteriors: Vector,
    pub label: usize,
    /// True iff every target neuron was dropped by this query's masks.
    pub activated: bool,
}

/// All queries issued for one evaluation input.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub input_index: usize,
    /// Prediction with dropout disabled.
    pub clean_label: usize,
    pub records: Vec<QueryRecord>,
}

impl Transcript {
    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.records.iter().map(|r| r.label)
    }

    /// The first `q` records.
    pub fn truncated(&self, q: usize) -> Transcript {
        Transcript {
            input_index: self.input_index,
            clean_label: self.clean_label,
            records: self.records[..q.min(self.records.len())].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
struct StreamEntry {
    stream: RngStream,
    queries: u64,
}

/// A seeded query service: one RNG stream per stream id, plus a global counter.
#[derive(Debug, Clone)]
pub struct QuerySession {
    master_seed: u64,
    streams: BTreeMap<u64, StreamEntry>,
    served: u64,
}

/// Serializable snapshot of a [`QuerySession`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub master_seed: u64,
    pub served: u64,
    pub streams: Vec<StreamSnapshot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSnapshot {
    pub stream: StreamState,
    pub queries: u64,
}

impl QuerySession {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            streams: BTreeMap::new(),
            served: 0,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Total predictions served (including padding queries).
    pub fn queries_served(&self) -> u64 {
        self.served
    }

    /// Queries served so far on `stream_id`.
    pub fn stream_queries(&self, stream_id: u64) -> u64 {
        self.streams.get(&stream_id).map_or(0, |e| e.queries)
    }

    fn entry(&mut self, stream_id: u64) -> &mut StreamEntry {
        let seed = self.master_seed;
        self.streams.entry(stream_id).or_insert_with(|| StreamEntry {
            stream: RngStream::new(seed, stream_id),
            queries: 0,
        })
    }

    pub fn state(&self) -> SessionState {
        SessionState {
            master_seed: self.master_seed,
            served: self.served,
            streams: self
                .streams
                .values()
                .map(|e| StreamSnapshot {
                    stream: e.stream.state(),
                    queries: e.queries,
                })
                .collect(),
        }
    }

    pub fn restore(state: &SessionState) -> Result<Self> {
        let mut streams = BTreeMap::new();
        for s in &state.streams {
            if s.stream.master_seed != state.master_seed {
                return Err(contract("stream snapshot belongs to a different master seed"));
            }
            streams.insert(
                s.stream.stream_id,
                StreamEntry {
                    stream: RngStream::restore(s.stream),
                    queries: s.queries,
                },
            );
        }
        Ok(Self {
            master_seed: state.master_seed,
            streams,
            served: state.served,
        })
    }

    /// Draws this query's masks and books the query.
    fn next_masks(
        &mut self,
        spec: &ModelSpec,
        plan: &DropoutPlan,
        stream_id: u64,
    ) -> Result<(u64, Vec<Option<Mask>>)> {
        let entry = self.entry(stream_id);
        let masks = plan.sample_inference_masks(spec, &mut entry.stream)?;
        entry.queries += 1;
        let index = entry.queries;
        self.served += 1;
        Ok((index, masks))
    }
}

/// Model shape recovered from the parameter shapes.
pub fn spec_of(params: &Parameters) -> ModelSpec {
    let mut widths = vec![params.input_width()];
    widths.extend(params.layers.iter().map(|l| l.bias.len()));
    ModelSpec::new(widths).expect("parameters always describe a valid model")
}

/// One prediction with prediction-time dropout on `stream_id`.
pub fn predict(
    params: &Parameters,
    input: &[f64],
    plan: &DropoutPlan,
    session: &mut QuerySession,
    stream_id: u64,
) -> Result<QueryRecord> {
    let first = first_hidden_activation(params, input)?;
    predict_prepared(params, &spec_of(params), &first, plan, session, stream_id)
}

fn predict_prepared(
    params: &Parameters,
    spec: &ModelSpec,
    first: &[f64],
    plan: &DropoutPlan,
    session: &mut QuerySession,
    stream_id: u64,
) -> Result<QueryRecord> {
    let (query_index, masks) = session.next_masks(spec, plan, stream_id)?;
    let posteriors = posteriors_from_first_activation(params, first, &masks)?;
    let label = argmax_tiebreak_low(&posteriors)?;
    Ok(QueryRecord {
        query_index,
        posteriors,
        label,
        activated: all_targets_dropped(&plan.targets, &masks),
    })
}

/// `num_queries` sequential predictions of the same input on `stream_id`.
pub fn query_campaign(
    params: &Parameters,
    input: &[f64],
    plan: &DropoutPlan,
    num_queries: usize,
    session: &mut QuerySession,
    stream_id: u64,
) -> Result<Vec<QueryRecord>> {
    if num_queries == 0 {
        return Err(contract("a campaign needs at least one query"));
    }
    let spec = spec_of(params);
    plan.validate(&spec)?;
    // masks act after the activation, so the first layer is shared by all queries
    let first = first_hidden_activation(params, input)?;
    (0..num_queries)
        .map(|_| predict_prepared(params, &spec, &first, plan, session, stream_id))
        .collect()
}

/// Campaigns over `indices` rows of `inputs`, each on its own stream (`stream id = row index`)
/// of a fresh session seeded with `master_seed`. Runs in parallel with the `parallel` feature.
pub fn run_campaigns(
    params: &Parameters,
    inputs: &Matrix,
    indices: &[usize],
    plan: &DropoutPlan,
    num_queries: usize,
    master_seed: u64,
) -> Result<Vec<Transcript>> {
    let one = |&i: &usize| -> Result<Transcript> {
        if i >= inputs.rows() {
            return Err(contract(format!("input index {i} out of range")));
        }
        let x = inputs.row(i);
        let clean = posteriors_from_first_activation(params, &first_hidden_activation(params, x)?, &[])?;
        let mut session = QuerySession::new(master_seed);
        Ok(Transcript {
            input_index: i,
            clean_label: argmax_tiebreak_low(&clean)?,
            records: query_campaign(params, x, plan, num_queries, &mut session, i as u64)?,
        })
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        indices.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        indices.iter().map(one).collect()
    }
}

fn never_fires(plan: &DropoutPlan, targets: &[LayerTargets]) -> bool {
    targets.iter().any(|t| {
        !t.neurons.is_empty() && plan.inference_rates.get(t.layer).is_none_or(|&r| r <= 0.0)
    })
}

/// Replays `stream` for up to `horizon` queries and returns the 1-based offset of the first
/// query whose masks drop every target.
fn first_activation_from(
    mut stream: RngStream,
    spec: &ModelSpec,
    plan: &DropoutPlan,
    targets: &[LayerTargets],
    horizon: u64,
) -> Result<Option<u64>> {
    if never_fires(plan, targets) {
        return Ok(None);
    }
    for q in 1..=horizon {
        let masks = plan.sample_inference_masks(spec, &mut stream)?;
        if all_targets_dropped(targets, &masks) {
            return Ok(Some(q));
        }
    }
    Ok(None)
}

/// Offline prediction of the first query (1-based, `<= horizon`) on a fresh stream
/// `(master_seed, stream_id)` at which every target neuron is dropped. Simulates mask draws only.
pub fn predict_activation_query(
    master_seed: u64,
    stream_id: u64,
    spec: &ModelSpec,
    plan: &DropoutPlan,
    targets: &[LayerTargets],
    horizon: u64,
) -> Result<Option<u64>> {
    if horizon == 0 {
        return Err(contract("horizon must be at least 1"));
    }
    plan.validate(spec)?;
    first_activation_from(RngStream::new(master_seed, stream_id), spec, plan, targets, horizon)
}

/// Pads `stream_id` with throwaway queries so that the next prediction on it activates the
/// backdoor. Padding queries are served (and counted) but their outputs are discarded, so only
/// their mask draws are performed. Returns the number of padding queries.
pub fn schedule_dos(
    session: &mut QuerySession,
    stream_id: u64,
    spec: &ModelSpec,
    plan: &DropoutPlan,
    targets: &[LayerTargets],
    horizon: u64,
) -> Result<u64> {
    if horizon == 0 {
        return Err(contract("horizon must be at least 1"));
    }
    plan.validate(spec)?;
    let probe = session.entry(stream_id).stream.clone();
    let first = first_activation_from(probe, spec, plan, targets, horizon)?
        .ok_or(Error::HorizonExhausted { horizon })?;
    let padding = first - 1;
    for _ in 0..padding {
        session.next_masks(spec, plan, stream_id)?;
    }
    Ok(padding)
}

pub const TRANSCRIPT_HEADER_PREFIX: &str = "input_index,query_index,predicted_label,activated";

/// One CSV row per query: input index, query index, predicted label, activation flag (0/1),
/// then posterior entries `p0..p{k-1}`.
pub fn write_transcripts_csv<W: Write>(mut w: W, transcripts: &[Transcript]) -> io::Result<()> {
    let classes = transcripts
        .iter()
        .find_map(|t| t.records.first())
        .map_or(0, |r| r.posteriors.len());
    write!(w, "{TRANSCRIPT_HEADER_PREFIX}")?;
    for c in 0..classes {
        write!(w, ",p{c}")?;
    }
    writeln!(w)?;
    for t in transcripts {
        for r in &t.records {
            write!(
                w,
                "{},{},{},{}",
                t.input_index,
                r.query_index,
                r.label,
                u8::from(r.activated)
            )?;
            for p in r.posteriors.iter() {
                write!(w, ",{p}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward, init_params};

    fn setup(rate: f64) -> (ModelSpec, Parameters, DropoutPlan) {
        let spec = ModelSpec::new(vec![6, 10, 8, 3]).unwrap();
        let params = init_params(&spec, 5);
        let plan = DropoutPlan::uniform(&spec, 0.5, rate, vec![LayerTargets::new(1, [3]).unwrap()]).unwrap();
        (spec, params, plan)
    }

    fn x() -> Vec<f64> {
        vec![0.1, 0.5, 0.9, 0.3, 0.7, 0.2]
    }

    #[test]
    fn rate_zero_equals_plain_forward() {
        let (_, p, plan) = setup(0.0);
        let mut s = QuerySession::new(1);
        let rec = predict(&p, &x(), &plan, &mut s, 0).unwrap();
        assert_eq!(rec.posteriors, forward(&p, &x(), &[]).unwrap().posteriors);
        assert!(!rec.activated);
        assert_eq!(rec.query_index, 1);
        assert_eq!(s.queries_served(), 1);
    }

    #[test]
    fn predict_matches_full_forward_with_the_drawn_masks() {
        let (spec, p, plan) = setup(0.3);
        let mut s = QuerySession::new(8);
        let mut shadow = RngStream::new(8, 2);
        for _ in 0..10 {
            let rec = predict(&p, &x(), &plan, &mut s, 2).unwrap();
            let masks = plan.sample_inference_masks(&spec, &mut shadow).unwrap();
            assert_eq!(rec.posteriors, forward(&p, &x(), &masks).unwrap().posteriors);
            assert_eq!(rec.activated, plan.activated_by(&masks));
            assert_eq!(rec.label, argmax_tiebreak_low(&rec.posteriors).unwrap());
        }
    }

    #[test]
    fn replaying_a_session_reproduces_records() {
        let (_, p, plan) = setup(0.2);
        let a = query_campaign(&p, &x(), &plan, 50, &mut QuerySession::new(3), 7).unwrap();
        let b = query_campaign(&p, &x(), &plan, 50, &mut QuerySession::new(3), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert_eq!(a.last().unwrap().query_index, 50);
    }

    #[test]
    fn single_query_campaign() {
        let (_, p, plan) = setup(0.2);
        let mut s = QuerySession::new(3);
        assert_eq!(query_campaign(&p, &x(), &plan, 1, &mut s, 0).unwrap().len(), 1);
        assert!(query_campaign(&p, &x(), &plan, 0, &mut s, 0).is_err());
    }

    #[test]
    fn session_snapshot_continues_identically() {
        let (_, p, plan) = setup(0.2);
        let mut s = QuerySession::new(11);
        query_campaign(&p, &x(), &plan, 17, &mut s, 1).unwrap();
        query_campaign(&p, &x(), &plan, 5, &mut s, 4).unwrap();
        let snap = s.state();
        let text = toml::to_string(&snap).unwrap();
        let mut restored = QuerySession::restore(&toml::from_str(&text).unwrap()).unwrap();
        let rest_a = query_campaign(&p, &x(), &plan, 30, &mut s, 1).unwrap();
        let rest_b = query_campaign(&p, &x(), &plan, 30, &mut restored, 1).unwrap();
        assert_eq!(rest_a, rest_b);
        assert_eq!(s.queries_served(), restored.queries_served());
        assert_eq!(s.queries_served(), 52);
    }

    #[test]
    fn activation_frequency_matches_rate() {
        let (_, p, plan) = setup(0.001);
        let n = 100_000;
        let recs = query_campaign(&p, &x(), &plan, n, &mut QuerySession::new(21), 0).unwrap();
        let hits = recs.iter().filter(|r| r.activated).count() as f64;
        let mu = n as f64 * 0.001;
        let sigma = (n as f64 * 0.001 * 0.999).sqrt();
        assert!((hits - mu).abs() <= 3.0 * sigma, "hits {hits}");
    }

    #[test]
    fn predicted_activation_matches_replay() {
        let (spec, p, plan) = setup(0.05);
        for seed in 0..20 {
            let predicted = predict_activation_query(seed, 3, &spec, &plan, &plan.targets, 2000)
                .unwrap()
                .expect("p=0.05 fires within 2000 queries");
            let recs = query_campaign(&p, &x(), &plan, predicted as usize, &mut QuerySession::new(seed), 3).unwrap();
            let first = recs.iter().position(|r| r.activated).map(|i| i as u64 + 1);
            assert_eq!(first, Some(predicted));
        }
    }

    #[test]
    fn activation_prediction_edge_cases() {
        let (spec, _, plan) = setup(0.0);
        assert_eq!(predict_activation_query(1, 0, &spec, &plan, &plan.targets, 10_000).unwrap(), None);
        let (spec, _, plan) = setup(0.01);
        assert_eq!(predict_activation_query(1, 0, &spec, &plan, &[], 5).unwrap(), Some(1));
        let empty_layer = [LayerTargets { layer: 0, neurons: vec![] }];
        assert_eq!(predict_activation_query(1, 0, &spec, &plan, &empty_layer, 5).unwrap(), Some(1));
        assert!(predict_activation_query(1, 0, &spec, &plan, &plan.targets, 0).is_err());
    }

    #[test]
    fn dos_makes_the_next_query_fire() {
        let (spec, p, plan) = setup(0.02);
        for seed in 0..20 {
            let mut s = QuerySession::new(seed);
            query_campaign(&p, &x(), &plan, (seed % 7 + 1) as usize, &mut s, 0).unwrap();
            let before = s.queries_served();
            let pad = schedule_dos(&mut s, 0, &spec, &plan, &plan.targets, 10_000).unwrap();
            assert_eq!(s.queries_served(), before + pad);
            let rec = predict(&p, &x(), &plan, &mut s, 0).unwrap();
            assert!(rec.activated, "seed {seed}");
        }
    }

    #[test]
    fn dos_without_padding_when_next_query_fires() {
        let (spec, p, plan) = setup(0.3);
        // find a session position where the very next query activates
        let mut s = QuerySession::new(4);
        loop {
            let probe = s.clone().state();
            let mut trial = QuerySession::restore(&probe).unwrap();
            if predict(&p, &x(), &plan, &mut trial, 0).unwrap().activated {
                break;
            }
            predict(&p, &x(), &plan, &mut s, 0).unwrap();
        }
        assert_eq!(schedule_dos(&mut s, 0, &spec, &plan, &plan.targets, 10).unwrap(), 0);
    }

    #[test]
    fn dos_with_rate_zero_exhausts_horizon() {
        let (spec, _, plan) = setup(0.0);
        let mut s = QuerySession::new(1);
        assert!(matches!(
            schedule_dos(&mut s, 0, &spec, &plan, &plan.targets, 500),
            Err(Error::HorizonExhausted { horizon: 500 })
        ));
        assert_eq!(s.queries_served(), 0);
    }

    #[test]
    fn transcript_csv_layout() {
        let (_, p, plan) = setup(0.1);
        let recs = query_campaign(&p, &x(), &plan, 3, &mut QuerySession::new(1), 0).unwrap();
        let t = Transcript {
            input_index: 4,
            clean_label: 0,
            records: recs,
        };
        let mut out = Vec::new();
        write_transcripts_csv(&mut out, &[t]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "input_index,query_index,predicted_label,activated,p0,p1,p2");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("4,1,"));
        assert_eq!(lines[3].split(',').count(), 7);
    }

    #[test]
    fn campaigns_use_per_input_streams() {
        let (_, p, plan) = setup(0.2);
        let inputs = Matrix::from_rows(&[x(), x().iter().rev().copied().collect()]).unwrap();
        let ts = run_campaigns(&p, &inputs, &[0, 1], &plan, 20, 9).unwrap();
        let solo = query_campaign(&p, inputs.row(1), &plan, 20, &mut QuerySession::new(9), 1).unwrap();
        assert_eq!(ts[1].records, solo);
        assert_eq!(ts[0].input_index, 0);
    }
}
