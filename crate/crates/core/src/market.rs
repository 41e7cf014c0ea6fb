//! Entry and exit of vehicle products with sunk costs.
//!
//! Each event is one observation. Events are pooled into cells keyed by
//! `(product type, kind)`; cell `c` carries one inequality
//!
//! * entry: `x_j' eta - E_c[dpi] <= 0`, where `dpi = pi(J) - pi(J \ j)`;
//! * exit: `-lambda x_j' eta - E_c[dpi] <= 0`, where `dpi = pi(J) - pi(J + j)`.
//!
//! In the separable layout `M` stacks the characteristics of every type
//! that appears in a cell, `N_i[c] = (n / n_c) dpi_i` when event `i` falls in
//! cell `c` (zero otherwise), `C = I` and `rho = 0`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::demand::{
    simulate_shares, DemandData, DemandRow, Draws, N_CHARACTERISTICS, N_DEMAND_PARAMS,
};
use crate::error::{Error, Result};
use crate::two_stage::{Constraints, FirstStageEstimate, MomentModel};

/// `(lambda, eta_1..eta_4)`.
pub const THETA_DIM: usize = 1 + N_CHARACTERISTICS;
pub const MAX_PRODUCT_TYPES: u32 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Entry,
    Exit,
}

impl EventKind {
    fn as_str(self) -> &'static str {
        match self {
            EventKind::Entry => "entry",
            EventKind::Exit => "exit",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleEvent {
    pub firm: u32,
    pub period: u32,
    pub product: u32,
    pub kind: EventKind,
}

pub fn read_events<R: Read>(reader: R) -> Result<Vec<VehicleEvent>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("events header: {e}")))?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["firm", "period", "product", "kind"] {
        return Err(Error::Schema(
            "events header must be firm,period,product,kind".into(),
        ));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Schema(format!("events row {}: {e}", line + 1)))?;
        let int = |c: usize| -> Result<u32> {
            rec[c].parse().map_err(|_| {
                Error::Schema(format!(
                    "events row {}: bad integer in column {c}",
                    line + 1
                ))
            })
        };
        let kind = match &rec[3] {
            "entry" => EventKind::Entry,
            "exit" => EventKind::Exit,
            other => {
                return Err(Error::Schema(format!(
                    "events row {}: unknown kind {other}",
                    line + 1
                )))
            }
        };
        out.push(VehicleEvent {
            firm: int(0)?,
            period: int(1)?,
            product: int(2)?,
            kind,
        });
    }
    Ok(out)
}

pub fn write_events<W: Write>(events: &[VehicleEvent], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_io = |e: csv::Error| Error::io("events csv", std::io::Error::other(e));
    w.write_record(["firm", "period", "product", "kind"])
        .map_err(to_io)?;
    for e in events {
        w.write_record([
            e.firm.to_string(),
            e.period.to_string(),
            e.product.to_string(),
            e.kind.as_str().to_string(),
        ])
        .map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io("events csv", e))?;
    Ok(())
}

pub fn read_events_path(path: &Path) -> Result<Vec<VehicleEvent>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_events(std::io::BufReader::new(f))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SunkCostTheta {
    pub lambda: f64,
    pub eta: [f64; N_CHARACTERISTICS],
}

impl SunkCostTheta {
    pub fn from_slice(theta: &[f64]) -> Result<Self> {
        if theta.len() != THETA_DIM {
            return Err(Error::shape("theta", THETA_DIM, theta.len()));
        }
        Ok(Self {
            lambda: theta[0],
            eta: [theta[1], theta[2], theta[3], theta[4]],
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.lambda];
        v.extend_from_slice(&self.eta);
        v
    }
}

/// One product offered in a market, as seen by the profit calculation.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductState {
    pub firm: u32,
    pub product: u32,
    pub x: [f64; N_CHARACTERISTICS],
    pub price: f64,
    pub mc: f64,
    /// Mean utility; `None` means the model-implied value `x' beta - alpha p` (`xi = 0`).
    pub zeta: Option<f64>,
    /// Heterogeneity shift for each simulation draw.
    pub shift: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarketState {
    pub market_size: f64,
    pub products: Vec<ProductState>,
}

impl MarketState {
    /// Variable profit of `firm` when it offers the product types in `set`
    /// and every rival product stays in the choice set.
    pub fn firm_profit(&self, firm: u32, set: &[u32], delta: &DVector<f64>) -> Result<f64> {
        if delta.len() != N_DEMAND_PARAMS {
            return Err(Error::shape("delta", N_DEMAND_PARAMS, delta.len()));
        }
        for &j in set {
            if !self
                .products
                .iter()
                .any(|p| p.firm == firm && p.product == j)
            {
                return Err(Error::UnknownProduct(format!("firm {firm} product {j}")));
            }
        }
        let chosen: Vec<&ProductState> = self
            .products
            .iter()
            .filter(|p| p.firm != firm || set.contains(&p.product))
            .collect();
        if chosen.is_empty() {
            return Ok(0.0);
        }
        let r = chosen[0].shift.len();
        let zeta = DVector::from_iterator(
            chosen.len(),
            chosen.iter().map(|p| {
                p.zeta.unwrap_or_else(|| {
                    let mut u = -delta[N_CHARACTERISTICS] * p.price;
                    for k in 0..N_CHARACTERISTICS {
                        u += p.x[k] * delta[k];
                    }
                    u
                })
            }),
        );
        let shifts = DMatrix::from_fn(r, chosen.len(), |row, col| chosen[col].shift[row]);
        let shares = simulate_shares(&zeta, &shifts)?;
        let mut profit = 0.0;
        for (p, s) in chosen.iter().zip(shares.iter()) {
            if p.firm == firm {
                profit += (p.price - p.mc) * self.market_size * s;
            }
        }
        Ok(profit)
    }
}

/// `pi_f(J1) - pi_f(J2)` in one market.
pub fn profit_delta(
    state: &MarketState,
    firm: u32,
    j1: &[u32],
    j2: &[u32],
    delta: &DVector<f64>,
) -> Result<f64> {
    Ok(state.firm_profit(firm, j1, delta)? - state.firm_profit(firm, j2, delta)?)
}

#[derive(Clone, Debug)]
struct EventMarket {
    state: MarketState,
    observed: Vec<u32>,
    counterfactual: Vec<u32>,
}

#[derive(Clone, Debug)]
struct ResolvedEvent {
    event: VehicleEvent,
    cell: usize,
    markets: Vec<EventMarket>,
    /// Entry rows do not depend on `delta`; their profit gap is computed once.
    fixed: Option<f64>,
}

impl ResolvedEvent {
    fn delta_pi(&self, delta: &DVector<f64>) -> Result<f64> {
        if let Some(v) = self.fixed {
            return Ok(v);
        }
        let mut total = 0.0;
        for m in &self.markets {
            total += profit_delta(
                &m.state,
                self.event.firm,
                &m.observed,
                &m.counterfactual,
                delta,
            )?;
        }
        Ok(total)
    }
}

/// The entry/exit moment model evaluated on one dataset.
#[derive(Clone, Debug)]
pub struct MarketModel {
    events: Vec<ResolvedEvent>,
    /// `(type, kind)` per cell, sorted.
    cells: Vec<(u32, EventKind)>,
    cell_counts: Vec<usize>,
    /// Distinct product types in cell order, with their characteristics.
    types: Vec<(u32, [f64; N_CHARACTERISTICS])>,
    n_demand: usize,
    /// Demand rows whose influence values are attributed to each event.
    influence_rows: Vec<Vec<usize>>,
}

fn market_state(
    data: &DemandData,
    zeta: &DVector<f64>,
    idx: &[usize],
    draws: &Draws,
) -> MarketState {
    MarketState {
        market_size: data.rows[idx[0]].market_size,
        products: idx
            .iter()
            .map(|&i| {
                let r = &data.rows[i];
                ProductState {
                    firm: r.firm,
                    product: r.product,
                    x: r.x,
                    price: r.price,
                    mc: r.mc,
                    zeta: Some(zeta[i]),
                    shift: draws.product_shift(&r.x, r.price),
                }
            })
            .collect(),
    }
}

fn firm_set(data: &DemandData, idx: &[usize], firm: u32) -> Vec<u32> {
    let mut set: Vec<u32> = idx
        .iter()
        .map(|&i| &data.rows[i])
        .filter(|r| r.firm == firm)
        .map(|r| r.product)
        .collect();
    set.sort_unstable();
    set
}

impl MarketModel {
    /// Resolves every event against the demand data. `zeta` holds the
    /// inverted mean utilities in demand-row order.
    pub fn new(
        data: &DemandData,
        zeta: &DVector<f64>,
        events: &[VehicleEvent],
        draws: &Draws,
    ) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::EmptyEvents);
        }
        if zeta.len() != data.len() {
            return Err(Error::shape("mean utilities", data.len(), zeta.len()));
        }
        let mut by_period: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
        for ((period, market), idx) in data.markets() {
            by_period.entry(period).or_default().insert(market, idx);
        }

        let cells: Vec<(u32, EventKind)> = events
            .iter()
            .map(|e| (e.product, e.kind))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut cell_counts = vec![0; cells.len()];
        let mut type_x: BTreeMap<u32, [f64; N_CHARACTERISTICS]> = BTreeMap::new();

        let mut resolved = Vec::with_capacity(events.len());
        for e in events {
            let here = by_period.get(&e.period).ok_or_else(|| {
                Error::Schema(format!(
                    "event {e:?}: no demand data for period {}",
                    e.period
                ))
            })?;
            let before = e.period.checked_sub(1).and_then(|p| by_period.get(&p));
            let mut markets = Vec::with_capacity(here.len());
            for (&market, idx) in here {
                let mut state = market_state(data, zeta, idx, draws);
                let observed = firm_set(data, idx, e.firm);
                let prev_row = before
                    .and_then(|b| b.get(&market))
                    .and_then(|b| {
                        b.iter().find(|&&i| {
                            data.rows[i].firm == e.firm && data.rows[i].product == e.product
                        })
                    })
                    .map(|&i| &data.rows[i]);
                let counterfactual = match e.kind {
                    EventKind::Entry => {
                        if !observed.contains(&e.product) {
                            return Err(Error::Schema(format!(
                                "entry event {e:?}: product not offered in market {market}"
                            )));
                        }
                        if prev_row.is_some() {
                            return Err(Error::Schema(format!(
                                "entry event {e:?}: product already offered in the previous period"
                            )));
                        }
                        let row = idx
                            .iter()
                            .map(|&i| &data.rows[i])
                            .find(|r| r.firm == e.firm && r.product == e.product)
                            .expect("checked above");
                        type_x.entry(e.product).or_insert(row.x);
                        observed
                            .iter()
                            .copied()
                            .filter(|&j| j != e.product)
                            .collect()
                    }
                    EventKind::Exit => {
                        if observed.contains(&e.product) {
                            return Err(Error::Schema(format!(
                                "exit event {e:?}: product still offered in market {market}"
                            )));
                        }
                        let prev = prev_row.ok_or_else(|| {
                            Error::UnknownProduct(format!(
                                "exit event {e:?}: no previous-period row in market {market}"
                            ))
                        })?;
                        type_x.entry(e.product).or_insert(prev.x);
                        state.products.push(ProductState {
                            firm: e.firm,
                            product: e.product,
                            x: prev.x,
                            price: prev.price,
                            mc: prev.mc,
                            zeta: None,
                            shift: draws.product_shift(&prev.x, prev.price),
                        });
                        let mut with = observed.clone();
                        with.push(e.product);
                        with.sort_unstable();
                        with
                    }
                };
                markets.push(EventMarket {
                    state,
                    observed,
                    counterfactual,
                });
            }
            let cell = cells
                .binary_search(&(e.product, e.kind))
                .expect("cell exists");
            cell_counts[cell] += 1;
            let mut r = ResolvedEvent {
                event: *e,
                cell,
                markets,
                fixed: None,
            };
            if e.kind == EventKind::Entry {
                r.fixed = Some(r.delta_pi(&DVector::zeros(N_DEMAND_PARAMS))?);
            }
            resolved.push(r);
        }

        let types = type_x.into_iter().collect();
        let influence_rows = assign_influence(data, events);
        Ok(Self {
            events: resolved,
            cells,
            cell_counts,
            types,
            n_demand: data.len(),
            influence_rows,
        })
    }

    pub fn cells(&self) -> &[(u32, EventKind)] {
        &self.cells
    }

    pub fn events(&self) -> impl Iterator<Item = &VehicleEvent> {
        self.events.iter().map(|r| &r.event)
    }

    /// Realised profit gap of event `i`.
    pub fn delta_pi(&self, i: usize, delta: &DVector<f64>) -> Result<f64> {
        self.events[i].delta_pi(delta)
    }

    fn type_block(&self, product: u32) -> usize {
        self.types
            .binary_search_by_key(&product, |(j, _)| *j)
            .expect("every cell type has characteristics")
    }

    /// All per-event moments together with the constraint layout at `theta`.
    pub fn build_moment_rows(
        &self,
        theta: &SunkCostTheta,
        delta: &DVector<f64>,
    ) -> Result<(Vec<DVector<f64>>, Constraints)> {
        let theta = theta.to_vec();
        let rows = (0..self.n_obs())
            .map(|i| self.moment(i, &theta, delta))
            .collect::<Result<_>>()?;
        Ok((rows, self.constraints(&theta)?))
    }
}

/// Attributes demand rows to events in period order: the `r`-th row (by
/// period) goes to the event at position `floor(r n_E / n_D)`.
fn assign_influence(data: &DemandData, events: &[VehicleEvent]) -> Vec<Vec<usize>> {
    let mut rows: Vec<usize> = (0..data.len()).collect();
    rows.sort_by_key(|&i| (data.rows[i].period, i));
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by_key(|&i| (events[i].period, i));
    let n_e = events.len();
    let n_d = rows.len();
    let mut out = vec![Vec::new(); n_e];
    for (r, &row) in rows.iter().enumerate() {
        out[order[r * n_e / n_d]].push(row);
    }
    out
}

impl MomentModel for MarketModel {
    fn n_obs(&self) -> usize {
        self.events.len()
    }

    fn dim_m(&self) -> usize {
        self.types.len() * N_CHARACTERISTICS
    }

    fn dim_n(&self) -> usize {
        self.cells.len()
    }

    fn dim_theta(&self) -> usize {
        THETA_DIM
    }

    fn constraints(&self, theta: &[f64]) -> Result<Constraints> {
        let t = SunkCostTheta::from_slice(theta)?;
        let k = self.cells.len();
        let mut b = DMatrix::zeros(k, self.dim_m());
        for (c, &(product, kind)) in self.cells.iter().enumerate() {
            let col = self.type_block(product) * N_CHARACTERISTICS;
            let scale = match kind {
                EventKind::Entry => 1.0,
                EventKind::Exit => -t.lambda,
            };
            for q in 0..N_CHARACTERISTICS {
                b[(c, col + q)] = scale * t.eta[q];
            }
        }
        Ok(Constraints {
            b,
            c: DMatrix::identity(k, k),
            rho: DVector::zeros(k),
        })
    }

    fn moment(&self, i: usize, _theta: &[f64], delta: &DVector<f64>) -> Result<DVector<f64>> {
        let ev = &self.events[i];
        let dm = self.dim_m();
        let mut p = DVector::zeros(dm + self.cells.len());
        for (b, (_, x)) in self.types.iter().enumerate() {
            for q in 0..N_CHARACTERISTICS {
                p[b * N_CHARACTERISTICS + q] = x[q];
            }
        }
        let weight = self.events.len() as f64 / self.cell_counts[ev.cell] as f64;
        p[dm + ev.cell] = weight * ev.delta_pi(delta)?;
        Ok(p)
    }

    /// Demand-side influence values summed over the rows attributed to the
    /// event and rescaled by `n_E / n_D`, so that the event average equals
    /// the demand-row average.
    fn observation_influence(&self, i: usize, first: &FirstStageEstimate) -> Result<DVector<f64>> {
        if first.influence.len() != self.n_demand {
            return Err(Error::shape(
                "influence length",
                self.n_demand,
                first.influence.len(),
            ));
        }
        let dim = first.delta_hat.len();
        let mut acc = DVector::zeros(dim);
        for &r in &self.influence_rows[i] {
            acc += &first.influence[r];
        }
        Ok(acc * (self.events.len() as f64 / self.n_demand as f64))
    }

    fn moments_depend_on_theta(&self) -> bool {
        false
    }
}

/// Synthetic market configuration. Unknown keys are rejected when parsed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub firms: u32,
    pub product_types: u32,
    pub periods: u32,
    pub markets: u32,
    /// Random (firm, type) decisions drawn each period after the first.
    pub decisions_per_period: u32,
    /// Probability that a firm offers a given type in period 0.
    pub initial_offer_prob: f64,
    pub beta: [f64; N_CHARACTERISTICS],
    pub alpha: f64,
    pub lambda: f64,
    pub eta: [f64; N_CHARACTERISTICS],
    /// Heterogeneity standard deviations for `(beta, alpha)`.
    pub sigma: [f64; N_DEMAND_PARAMS],
    pub draws: usize,
    pub draws_seed: u64,
    pub xi_sd: f64,
    pub price_noise_sd: f64,
    /// Loading of the demand shock in prices.
    pub price_xi_loading: f64,
    pub markup: f64,
    pub mc_base: f64,
    pub mc_gvwr: f64,
    pub mc_shifter: f64,
    pub market_size: f64,
    pub market_growth: f64,
    /// Extra margin required beyond the threshold for entry and exit.
    pub slack: f64,
    /// Simulation draws for the firm's expectation over demand shocks.
    pub expectation_draws: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            firms: 3,
            product_types: 8,
            periods: 40,
            markets: 2,
            decisions_per_period: 3,
            initial_offer_prob: 0.5,
            beta: [1.5, -1.0, 0.8, 0.5],
            alpha: 1.0,
            lambda: 0.4,
            eta: [400.0, 150.0, 250.0, 200.0],
            sigma: [0.0; N_DEMAND_PARAMS],
            draws: 1,
            draws_seed: 7,
            xi_sd: 0.3,
            price_noise_sd: 0.1,
            price_xi_loading: 0.5,
            markup: 1.0,
            mc_base: 1.0,
            mc_gvwr: 0.5,
            mc_shifter: 1.0,
            market_size: 10_000.0,
            market_growth: 0.02,
            slack: 0.0,
            expectation_draws: 50,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| -> Result<()> {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be finite and positive"));
            }
            Ok(())
        };
        let nonneg = |field: &str, v: f64| -> Result<()> {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be finite and nonnegative"));
            }
            Ok(())
        };
        if self.firms == 0 {
            return Err(Error::config("firms", "must be at least 1"));
        }
        if self.product_types == 0 || self.product_types > MAX_PRODUCT_TYPES {
            return Err(Error::config("product_types", "must be between 1 and 30"));
        }
        if self.periods == 0 {
            return Err(Error::config("periods", "must be at least 1"));
        }
        if self.markets == 0 {
            return Err(Error::config("markets", "must be at least 1"));
        }
        if self.decisions_per_period == 0 {
            return Err(Error::config("decisions_per_period", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.initial_offer_prob) {
            return Err(Error::config("initial_offer_prob", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", "must be in [0, 1]"));
        }
        if self.beta.iter().chain(&self.eta).any(|v| !v.is_finite()) || !self.alpha.is_finite() {
            return Err(Error::config("beta/alpha/eta", "must be finite"));
        }
        for (k, s) in self.sigma.iter().enumerate() {
            nonneg(&format!("sigma[{k}]"), *s)?;
        }
        if self.draws == 0 {
            return Err(Error::config("draws", "must be at least 1"));
        }
        if self.expectation_draws == 0 {
            return Err(Error::config("expectation_draws", "must be at least 1"));
        }
        nonneg("xi_sd", self.xi_sd)?;
        nonneg("price_noise_sd", self.price_noise_sd)?;
        nonneg("slack", self.slack)?;
        nonneg("market_growth", self.market_growth)?;
        positive("market_size", self.market_size)?;
        if !(self.price_xi_loading.is_finite()
            && self.markup.is_finite()
            && self.mc_base.is_finite()
            && self.mc_gvwr.is_finite()
            && self.mc_shifter.is_finite())
        {
            return Err(Error::config(
                "price equation",
                "coefficients must be finite",
            ));
        }
        Ok(())
    }

    pub fn draws(&self) -> Result<Draws> {
        Draws::new(self.draws, self.sigma, self.draws_seed)
    }

    pub fn delta(&self) -> DVector<f64> {
        let mut d = self.beta.to_vec();
        d.push(self.alpha);
        DVector::from_vec(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub lambda: f64,
    pub eta: [f64; N_CHARACTERISTICS],
    /// `(beta_1..beta_4, alpha)`.
    pub delta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub demand: DemandData,
    pub events: Vec<VehicleEvent>,
    pub truth: Truth,
    pub draws: Draws,
}

/// Flag patterns cycled over product types; the first three switch on each
/// indicator once so that short type lists still vary every characteristic.
const FLAG_PATTERNS: [[f64; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
];

struct Offer {
    firm: u32,
    product: u32,
    x: [f64; N_CHARACTERISTICS],
    mc: f64,
    shifter: f64,
}

/// Realised period: one row per offered product and market.
struct PeriodDraw {
    rows: Vec<DemandRow>,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    draws: Draws,
    type_x: Vec<[f64; N_CHARACTERISTICS]>,
    delta: DVector<f64>,
    xi: Normal<f64>,
    price_noise: Normal<f64>,
}

impl Generator<'_> {
    fn mean_utility(&self, x: &[f64; N_CHARACTERISTICS], price: f64) -> f64 {
        x.iter()
            .zip(self.cfg.beta.iter())
            .fold(-self.cfg.alpha * price, |u, (a, b)| u + a * b)
    }

    fn price(&self, mc: f64, xi: f64, noise: f64) -> f64 {
        (mc + self.cfg.markup + self.cfg.price_xi_loading * xi + noise)
            .max(0.01 * mc.abs().max(1.0))
    }

    fn market_size(&self, market: u32, period: u32) -> f64 {
        self.cfg.market_size
            * (1.0 + self.cfg.market_growth * period as f64)
            * (1.0 + 0.25 * market as f64)
    }

    /// Market state at one shock realisation; `extra` is the counterfactual
    /// product kept at last period's terms.
    fn state(
        &self,
        offers: &[Offer],
        shocks: &[(f64, f64)],
        size: f64,
        extra: Option<ProductState>,
    ) -> MarketState {
        let mut products: Vec<ProductState> = offers
            .iter()
            .zip(shocks)
            .map(|(o, &(xi, noise))| {
                let price = self.price(o.mc, xi, noise);
                ProductState {
                    firm: o.firm,
                    product: o.product,
                    x: o.x,
                    price,
                    mc: o.mc,
                    zeta: Some(self.mean_utility(&o.x, price) + xi),
                    shift: self.draws.product_shift(&o.x, price),
                }
            })
            .collect();
        products.extend(extra);
        MarketState {
            market_size: size,
            products,
        }
    }
}

/// Simulates a market history with known `(lambda*, eta*, delta*)`.
///
/// Each period one randomly chosen (firm, type) pair considers changing its
/// status. Entry happens iff the expected profit gain is at least
/// `x' eta + slack`; exit happens iff the expected gain from keeping the
/// product, priced at last period's terms with `xi = 0`, is at most
/// `lambda x' eta - slack`. Expectations average over simulated demand and
/// price shocks, which are drawn independently of the realised ones.
pub fn synth_dgp(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = cfg.draws()?;
    let type_x: Vec<[f64; N_CHARACTERISTICS]> = (0..cfg.product_types as usize)
        .map(|j| {
            let f = FLAG_PATTERNS[j % FLAG_PATTERNS.len()];
            [0.5 + 1.5 * rng.random::<f64>(), f[0], f[1], f[2]]
        })
        .collect();
    let gen = Generator {
        cfg,
        draws: draws.clone(),
        type_x,
        delta: cfg.delta(),
        xi: Normal::new(0.0, cfg.xi_sd).map_err(|e| Error::config("xi_sd", e.to_string()))?,
        price_noise: Normal::new(0.0, cfg.price_noise_sd)
            .map_err(|e| Error::config("price_noise_sd", e.to_string()))?,
    };

    let mut portfolio: BTreeSet<(u32, u32)> = BTreeSet::new();
    for f in 0..cfg.firms {
        for j in 1..=cfg.product_types {
            if rng.random::<f64>() < cfg.initial_offer_prob {
                portfolio.insert((f, j));
            }
        }
    }

    let mut rows = Vec::new();
    let mut events = Vec::new();
    let mut previous: Option<PeriodDraw> = None;
    for t in 0..cfg.periods {
        // cost shifters are known before decisions are taken
        let shifters: BTreeMap<(u32, u32, u32), f64> = (0..cfg.markets)
            .flat_map(|m| {
                (0..cfg.firms).flat_map(move |f| (1..=cfg.product_types).map(move |j| (m, f, j)))
            })
            .map(|key| (key, rng.random::<f64>()))
            .collect();
        let offers_for = |set: &BTreeSet<(u32, u32)>, m: u32| -> Vec<Offer> {
            set.iter()
                .map(|&(f, j)| {
                    let x = gen.type_x[(j - 1) as usize];
                    let w = shifters[&(m, f, j)];
                    Offer {
                        firm: f,
                        product: j,
                        x,
                        mc: cfg.mc_base + cfg.mc_gvwr * x[0] + cfg.mc_shifter * w,
                        shifter: w,
                    }
                })
                .collect()
        };

        for _ in 0..cfg.decisions_per_period {
            let Some(prev) = previous.as_ref().filter(|_| t > 0) else {
                break;
            };
            let f = rng.random_range(0..cfg.firms);
            let j = rng.random_range(1..=cfg.product_types);
            let x = gen.type_x[(j - 1) as usize];
            let sunk: f64 = x.iter().zip(&cfg.eta).map(|(a, b)| a * b).sum();
            let offered = portfolio.contains(&(f, j));
            // a type added earlier this period has no last-period terms yet
            if offered && !prev.rows.iter().any(|r| r.firm == f && r.product == j) {
                continue;
            }
            let mut with = portfolio.clone();
            with.insert((f, j));
            let mut without = portfolio.clone();
            without.remove(&(f, j));
            let set_of = |s: &BTreeSet<(u32, u32)>| -> Vec<u32> {
                s.iter()
                    .filter(|(ff, _)| *ff == f)
                    .map(|(_, jj)| *jj)
                    .collect()
            };

            let mut expected_gain = 0.0;
            for _ in 0..cfg.expectation_draws {
                for m in 0..cfg.markets {
                    let size = gen.market_size(m, t);
                    if offered {
                        // keep j at last period's terms versus drop it
                        let offers = offers_for(&without, m);
                        let shocks: Vec<(f64, f64)> = offers
                            .iter()
                            .map(|_| (gen.xi.sample(&mut rng), gen.price_noise.sample(&mut rng)))
                            .collect();
                        let last = prev
                            .rows
                            .iter()
                            .find(|r| r.market == m && r.firm == f && r.product == j)
                            .expect("offered last period");
                        let kept = ProductState {
                            firm: f,
                            product: j,
                            x: last.x,
                            price: last.price,
                            mc: last.mc,
                            zeta: None,
                            shift: gen.draws.product_shift(&last.x, last.price),
                        };
                        let state = gen.state(&offers, &shocks, size, Some(kept));
                        expected_gain +=
                            profit_delta(&state, f, &set_of(&with), &set_of(&without), &gen.delta)?;
                    } else {
                        let offers = offers_for(&with, m);
                        let shocks: Vec<(f64, f64)> = offers
                            .iter()
                            .map(|_| (gen.xi.sample(&mut rng), gen.price_noise.sample(&mut rng)))
                            .collect();
                        let state = gen.state(&offers, &shocks, size, None);
                        expected_gain +=
                            profit_delta(&state, f, &set_of(&with), &set_of(&without), &gen.delta)?;
                    }
                }
            }
            expected_gain /= cfg.expectation_draws as f64;

            if offered && expected_gain <= cfg.lambda * sunk - cfg.slack {
                portfolio = without;
                events.push(VehicleEvent {
                    firm: f,
                    period: t,
                    product: j,
                    kind: EventKind::Exit,
                });
            } else if !offered && expected_gain >= sunk + cfg.slack {
                portfolio = with;
                events.push(VehicleEvent {
                    firm: f,
                    period: t,
                    product: j,
                    kind: EventKind::Entry,
                });
            }
        }

        let mut period_rows = Vec::new();
        for m in 0..cfg.markets {
            let size = gen.market_size(m, t);
            let offers = offers_for(&portfolio, m);
            if offers.is_empty() {
                continue;
            }
            let shocks: Vec<(f64, f64)> = offers
                .iter()
                .map(|_| (gen.xi.sample(&mut rng), gen.price_noise.sample(&mut rng)))
                .collect();
            let state = gen.state(&offers, &shocks, size, None);
            let zeta = DVector::from_iterator(
                state.products.len(),
                state.products.iter().map(|p| p.zeta.expect("realised")),
            );
            let shifts = DMatrix::from_fn(gen.draws.count(), state.products.len(), |r, c| {
                state.products[c].shift[r]
            });
            let shares = simulate_shares(&zeta, &shifts)?;
            for ((o, p), s) in offers.iter().zip(&state.products).zip(shares.iter()) {
                period_rows.push(DemandRow {
                    market: m,
                    period: t,
                    firm: o.firm,
                    product: o.product,
                    x: o.x,
                    price: p.price,
                    mc: o.mc,
                    quantity: size * s,
                    market_size: size,
                    instruments: vec![o.shifter],
                });
            }
        }
        rows.extend(period_rows.iter().cloned());
        previous = Some(PeriodDraw { rows: period_rows });
    }

    let demand = DemandData {
        rows,
        n_instruments: 1,
    };
    if !demand.is_empty() {
        demand.validate()?;
    }
    Ok(SynthDataset {
        demand,
        events,
        truth: Truth {
            lambda: cfg.lambda,
            eta: cfg.eta,
            delta: cfg.delta().iter().copied().collect(),
        },
        draws,
    })
}

impl SynthDataset {
    pub fn write_demand_csv<W: Write>(&self, w: W) -> Result<()> {
        self.demand.write_csv(w)
    }

    pub fn write_events_csv<W: Write>(&self, w: W) -> Result<()> {
        write_events(&self.events, w)
    }
}
