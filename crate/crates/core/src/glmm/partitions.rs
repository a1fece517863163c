//! Disease and acute-physiology data partitions.

use crate::cgm::EpisodeLabel;
use crate::encounters::BehaviorRow;
use crate::ingest::ParticipantType;

use super::{GlmmError, Partition};

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSet {
    pub dm_all: Result<Vec<BehaviorRow>, GlmmError>,
    pub dm_norm: Result<Vec<BehaviorRow>, GlmmError>,
    pub all: Result<Vec<BehaviorRow>, GlmmError>,
    pub dm: Result<Vec<BehaviorRow>, GlmmError>,
}

impl PartitionSet {
    pub fn get(&self, p: Partition) -> &Result<Vec<BehaviorRow>, GlmmError> {
        match p {
            Partition::DmAll => &self.dm_all,
            Partition::DmNorm => &self.dm_norm,
            Partition::All => &self.all,
            Partition::Dm => &self.dm,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Partition, &Result<Vec<BehaviorRow>, GlmmError>)> {
        Partition::ALL.into_iter().map(move |p| (p, self.get(p)))
    }
}

fn member(p: Partition, r: &BehaviorRow) -> bool {
    if !r.in_model_scope() {
        return false;
    }
    let control = r.participant_type == ParticipantType::Control;
    match p {
        Partition::DmAll | Partition::All => true,
        Partition::DmNorm => control || r.episode == EpisodeLabel::Normal,
        Partition::Dm => !control,
    }
}

pub fn partition_rows(rows: &[BehaviorRow], p: Partition) -> Result<Vec<BehaviorRow>, GlmmError> {
    let out: Vec<BehaviorRow> = rows.iter().filter(|r| member(p, r)).cloned().collect();
    if out.is_empty() {
        Err(GlmmError::EmptyPartition { partition: p.as_str().into() })
    } else {
        Ok(out)
    }
}

pub fn build_partitions(rows: &[BehaviorRow]) -> PartitionSet {
    PartitionSet {
        dm_all: partition_rows(rows, Partition::DmAll),
        dm_norm: partition_rows(rows, Partition::DmNorm),
        all: partition_rows(rows, Partition::All),
        dm: partition_rows(rows, Partition::Dm),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(pt: ParticipantType, ep: EpisodeLabel) -> BehaviorRow {
        BehaviorRow {
            participant_id: "p".into(),
            intersection_id: "i".into(),
            participant_type: pt,
            episode: ep,
            unsafe_stop: false,
        }
    }

    #[test]
    fn set_arithmetic() {
        let mut rows = vec![row(ParticipantType::Control, EpisodeLabel::Control); 4];
        rows.extend(vec![row(ParticipantType::T1dm, EpisodeLabel::Normal); 3]);
        rows.extend(vec![row(ParticipantType::T1dm, EpisodeLabel::SevereHyper); 2]);
        let s = build_partitions(&rows);
        let n = |p| s.get(p).as_ref().map(|v| v.len()).unwrap();
        assert_eq!((n(Partition::DmAll), n(Partition::DmNorm), n(Partition::All), n(Partition::Dm)), (9, 7, 9, 5));
    }

    #[test]
    fn control_only_corpus() {
        let rows = vec![row(ParticipantType::Control, EpisodeLabel::Control); 3];
        let s = build_partitions(&rows);
        assert_eq!(s.dm, Err(GlmmError::EmptyPartition { partition: "dm".into() }));
        assert!(s.dm_all.is_ok());
    }

    #[test]
    fn moderate_hyper_left_out() {
        let rows = vec![
            row(ParticipantType::T1dm, EpisodeLabel::ModerateHyper),
            row(ParticipantType::T1dm, EpisodeLabel::Hypo),
        ];
        let s = build_partitions(&rows);
        assert_eq!(s.dm_all.unwrap().len(), 1);
        assert_eq!(s.dm.unwrap().len(), 1);
    }
}
