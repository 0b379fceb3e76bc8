//! CSV schemas and writers. Every header is a fixed constant; writers flush
//! after each row so partial runs leave readable files.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::attack::ClientAttack;
use crate::dp::PrivacyReport;
use crate::error::Result;
use crate::protocol::RoundReport;

pub const ROUND_HEADER: &str =
    "round,acc,m_enc_pct,m_pers_pct,m_noise_pct,t_train_s,t_encrypt_s,t_aggregate_s,t_decrypt_s,eps_dp,alpha_star";
pub const SWEEP_HEADER: &str = "tau,rho,round,acc,m_enc_pct,m_pers_pct,m_noise_pct,t_train_s,t_encrypt_s,t_aggregate_s,t_decrypt_s,eps_dp,alpha_star";
pub const PRIVACY_HEADER: &str = "T,alpha_star,eps_rdp,eps_dp,delta";
pub const ATTACK_HEADER: &str = "round,client,le_acc,ln_acc,idlg_mse,visible_fraction";
pub const FISHER_HEADER: &str = "param_index,layer,raw,normalized";

/// Columns whose values depend on wall-clock time.
pub const TIMING_COLUMNS: [&str; 4] = ["t_train_s", "t_encrypt_s", "t_aggregate_s", "t_decrypt_s"];

pub fn round_row(r: &RoundReport) -> String {
    let m = r.mean_ratios();
    format!(
        "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
        r.round,
        r.accuracy,
        100.0 * m.enc,
        100.0 * m.pers,
        100.0 * m.noise,
        r.timings.train_s,
        r.timings.encrypt_s,
        r.timings.aggregate_s,
        r.timings.decrypt_s,
        r.privacy.eps_dp,
        r.privacy.alpha,
    )
}

pub fn sweep_row(tau: f64, rho: f64, r: &RoundReport) -> String {
    format!("{tau},{rho},{}", round_row(r))
}

pub fn privacy_row(p: &PrivacyReport) -> String {
    format!("{},{},{},{},{}", p.rounds, p.alpha, p.eps_rdp, p.eps_dp, p.delta)
}

pub fn attack_row(a: &ClientAttack) -> String {
    format!(
        "{},{},{},{},{},{}",
        a.round, a.client, a.le_acc, a.ln_acc, a.idlg_mse, a.visible_fraction
    )
}

/// Line-oriented CSV file with a fixed header.
#[derive(Debug)]
pub struct CsvSink {
    out: File,
    columns: usize,
}

impl CsvSink {
    pub fn create(path: impl AsRef<Path>, header: &str) -> Result<Self> {
        let mut out = File::create(path)?;
        writeln!(out, "{header}")?;
        Ok(CsvSink {
            out,
            columns: header.split(',').count(),
        })
    }

    pub fn push(&mut self, row: &str) -> Result<()> {
        debug_assert_eq!(row.split(',').count(), self.columns);
        writeln!(self.out, "{row}")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Blanks every timing column so two runs can be compared byte for byte.
pub fn strip_timing(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let drop: Vec<bool> = header.split(',').map(|c| TIMING_COLUMNS.contains(&c)).collect();
    let mut out = String::with_capacity(csv.len());
    out.push_str(header);
    out.push('\n');
    for line in lines {
        let cells: Vec<&str> = line
            .split(',')
            .enumerate()
            .map(|(i, c)| if drop.get(i).copied().unwrap_or(false) { "" } else { c })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::negotiation::ZoneRatios;
    use crate::protocol::StageTimings;

    #[test]
    fn golden_headers() {
        assert_eq!(
            ROUND_HEADER,
            "round,acc,m_enc_pct,m_pers_pct,m_noise_pct,t_train_s,t_encrypt_s,t_aggregate_s,t_decrypt_s,eps_dp,alpha_star"
        );
        assert_eq!(SWEEP_HEADER, format!("tau,rho,{ROUND_HEADER}"));
        assert_eq!(PRIVACY_HEADER, "T,alpha_star,eps_rdp,eps_dp,delta");
        assert_eq!(ATTACK_HEADER, "round,client,le_acc,ln_acc,idlg_mse,visible_fraction");
        assert_eq!(FISHER_HEADER, "param_index,layer,raw,normalized");
    }

    fn report() -> RoundReport {
        RoundReport {
            round: 3,
            participants: vec![0, 1],
            zone_ratios: vec![
                ZoneRatios {
                    enc: 0.25,
                    pers: 0.25,
                    noise: 0.5,
                },
                ZoneRatios {
                    enc: 0.25,
                    pers: 0.0,
                    noise: 0.75,
                },
            ],
            accuracy: 0.875,
            privacy: PrivacyReport {
                rounds: 3,
                alpha: 8.0,
                eps_rdp: 12.0,
                eps_dp: 9.5,
                eps_dp_raw: 9.5,
                delta: 1e-5,
            },
            timings: StageTimings {
                train_s: 0.5,
                ..StageTimings::default()
            },
        }
    }

    #[test]
    fn rows_match_their_headers() {
        let r = report();
        assert_eq!(
            round_row(&r),
            "3,0.875,25,12.5,62.5,0.500000,0.000000,0.000000,0.000000,9.5,8"
        );
        assert_eq!(sweep_row(0.05, 0.5, &r).split(',').count(), SWEEP_HEADER.split(',').count());
        assert_eq!(privacy_row(&r.privacy), "3,8,12,9.5,0.00001");
    }

    #[test]
    fn stripping_keeps_everything_but_timings() {
        let a = format!("{ROUND_HEADER}\n1,0.5,10,20,70,1.0,2.0,3.0,4.0,inf,1.5\n");
        let b = format!("{ROUND_HEADER}\n1,0.5,10,20,70,9.0,8.0,7.0,6.0,inf,1.5\n");
        assert_eq!(strip_timing(&a), strip_timing(&b));
        let c = format!("{ROUND_HEADER}\n1,0.6,10,20,70,1.0,2.0,3.0,4.0,inf,1.5\n");
        assert_ne!(strip_timing(&a), strip_timing(&c));
    }
}
