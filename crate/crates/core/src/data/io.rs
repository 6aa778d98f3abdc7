use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::*;

/// One CRF domain; each maps to one file on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Demographics,
    AdverseEvents,
    ConcomitantMedications,
    Labs,
    Vitals,
    Exposure,
    MedicalHistory,
    Procedures,
}

pub const DOMAINS: [Domain; 8] = [
    Domain::Demographics,
    Domain::AdverseEvents,
    Domain::ConcomitantMedications,
    Domain::Labs,
    Domain::Vitals,
    Domain::Exposure,
    Domain::MedicalHistory,
    Domain::Procedures,
];

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Demographics => "demographics",
            Domain::AdverseEvents => "adverse_events",
            Domain::ConcomitantMedications => "concomitant_medications",
            Domain::Labs => "labs",
            Domain::Vitals => "vitals",
            Domain::Exposure => "exposure",
            Domain::MedicalHistory => "medical_history",
            Domain::Procedures => "procedures",
        }
    }

    pub fn csv_name(self) -> String {
        format!("{}.csv", self.name())
    }

    pub fn ndjson_name(self) -> String {
        format!("{}.ndjson", self.name())
    }

    /// Column order of the CSV file, matching the data dictionary.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Domain::Demographics => &["patient_id", "age", "sex", "enrollment_day"],
            Domain::AdverseEvents => &[
                "ae_id",
                "patient_id",
                "term",
                "narrative",
                "grade",
                "start_day",
                "end_day",
                "causality",
                "action_taken",
                "serious",
            ],
            Domain::ConcomitantMedications => &[
                "cm_id",
                "patient_id",
                "drug_name",
                "indication_text",
                "linked_ae_id",
                "start_day",
                "end_day",
                "dose_text",
            ],
            Domain::Labs => &[
                "lab_id",
                "patient_id",
                "analyte",
                "value",
                "units",
                "collection_day",
                "normal_low",
                "normal_high",
            ],
            Domain::Vitals => &["vs_id", "patient_id", "day", "weight_kg", "systolic_bp", "diastolic_bp"],
            Domain::Exposure => &["ex_id", "patient_id", "dose_mg", "start_day", "end_day"],
            Domain::MedicalHistory => &["mh_id", "patient_id", "condition", "pre_study"],
            Domain::Procedures => &["pr_id", "patient_id", "name", "day"],
        }
    }
}

/// Row-level hooks shared by every domain record.
trait CrfRow: Serialize + DeserializeOwned {
    const DOMAIN: Domain;
    fn id(&self) -> &str;
    /// Field invariant violation as (column, message).
    fn check(&self) -> Option<(&'static str, String)> {
        None
    }
}

impl CrfRow for Patient {
    const DOMAIN: Domain = Domain::Demographics;
    fn id(&self) -> &str {
        &self.patient_id
    }
    fn check(&self) -> Option<(&'static str, String)> {
        (!(18..=120).contains(&self.age)).then(|| ("age", "age out of range 18–120".to_string()))
    }
}

impl CrfRow for AdverseEvent {
    const DOMAIN: Domain = Domain::AdverseEvents;
    fn id(&self) -> &str {
        &self.ae_id
    }
    fn check(&self) -> Option<(&'static str, String)> {
        if !(1..=5).contains(&self.grade) {
            return Some(("grade", "grade out of range 1–5".to_string()));
        }
        match self.end_day {
            Some(end) if end < self.start_day => Some(("end_day", "end_day before start_day".to_string())),
            _ => None,
        }
    }
}

impl CrfRow for ConcomitantMedication {
    const DOMAIN: Domain = Domain::ConcomitantMedications;
    fn id(&self) -> &str {
        &self.cm_id
    }
    fn check(&self) -> Option<(&'static str, String)> {
        match self.end_day {
            Some(end) if end < self.start_day => Some(("end_day", "end_day before start_day".to_string())),
            _ => None,
        }
    }
}

impl CrfRow for LabResult {
    const DOMAIN: Domain = Domain::Labs;
    fn id(&self) -> &str {
        &self.lab_id
    }
    fn check(&self) -> Option<(&'static str, String)> {
        if !(self.value >= 0.0 && self.value.is_finite()) {
            return Some(("value", "value must be a non-negative number".to_string()));
        }
        (self.normal_low >= self.normal_high)
            .then(|| ("normal_high", "normal_low must be below normal_high".to_string()))
    }
}

impl CrfRow for VitalSign {
    const DOMAIN: Domain = Domain::Vitals;
    fn id(&self) -> &str {
        &self.vs_id
    }
}

impl CrfRow for ExposureRecord {
    const DOMAIN: Domain = Domain::Exposure;
    fn id(&self) -> &str {
        &self.ex_id
    }
    fn check(&self) -> Option<(&'static str, String)> {
        (self.end_day < self.start_day).then(|| ("end_day", "end_day before start_day".to_string()))
    }
}

impl CrfRow for MedicalHistoryItem {
    const DOMAIN: Domain = Domain::MedicalHistory;
    fn id(&self) -> &str {
        &self.mh_id
    }
}

impl CrfRow for Procedure {
    const DOMAIN: Domain = Domain::Procedures;
    fn id(&self) -> &str {
        &self.pr_id
    }
}

/// Reads one CRF file per domain from `directory` (CSV preferred, NDJSON
/// accepted), records provenance and validates referential integrity.
pub fn import_dataset(directory: &Path) -> Result<StudyDataset, DataError> {
    let mut provenance = BTreeMap::new();
    let dataset = StudyDataset {
        patients: read_domain(directory, &mut provenance)?,
        adverse_events: read_domain(directory, &mut provenance)?,
        conmeds: read_domain(directory, &mut provenance)?,
        labs: read_domain(directory, &mut provenance)?,
        vitals: read_domain(directory, &mut provenance)?,
        exposures: read_domain(directory, &mut provenance)?,
        medical_history: read_domain(directory, &mut provenance)?,
        procedures: read_domain(directory, &mut provenance)?,
        provenance,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes the eight CSV files (header row always present).
pub fn export_dataset(dataset: &StudyDataset, directory: &Path) -> Result<(), DataError> {
    fs::create_dir_all(directory).map_err(|source| DataError::Io {
        path: directory.display().to_string(),
        source,
    })?;
    write_domain(directory, &dataset.patients)?;
    write_domain(directory, &dataset.adverse_events)?;
    write_domain(directory, &dataset.conmeds)?;
    write_domain(directory, &dataset.labs)?;
    write_domain(directory, &dataset.vitals)?;
    write_domain(directory, &dataset.exposures)?;
    write_domain(directory, &dataset.medical_history)?;
    write_domain(directory, &dataset.procedures)?;
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_domain<T: CrfRow>(
    directory: &Path,
    provenance: &mut BTreeMap<String, SourceRef>,
) -> Result<Vec<T>, DataError> {
    let domain = T::DOMAIN;
    let csv_path = directory.join(domain.csv_name());
    let ndjson_path = directory.join(domain.ndjson_name());
    let (rows, file) = if csv_path.is_file() {
        (read_csv::<T>(&csv_path)?, domain.csv_name())
    } else if ndjson_path.is_file() {
        (read_ndjson::<T>(&ndjson_path)?, domain.ndjson_name())
    } else {
        return Err(DataError::MissingFile {
            domain: domain.name().to_string(),
            directory: directory.display().to_string(),
        });
    };
    let mut records = Vec::with_capacity(rows.len());
    for (row, record) in rows {
        if let Some((column, message)) = record.check() {
            return Err(DataError::Malformed {
                file: file.clone(),
                row,
                column: column.to_string(),
                message,
            });
        }
        provenance.insert(
            record.id().to_string(),
            SourceRef {
                file: file.clone(),
                row,
            },
        );
        records.push(record);
    }
    Ok(records)
}

fn read_csv<T: CrfRow>(path: &Path) -> Result<Vec<(usize, T)>, DataError> {
    let file_name = T::DOMAIN.csv_name();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| DataError::Malformed {
            file: file_name.clone(),
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .clone();
    for column in T::DOMAIN.columns() {
        if !headers.iter().any(|h| h == *column) {
            return Err(DataError::Malformed {
                file: file_name.clone(),
                row: 0,
                column: column.to_string(),
                message: "missing column".to_string(),
            });
        }
    }
    let mut out = Vec::new();
    for (idx, result) in reader.deserialize::<T>().enumerate() {
        let row = idx + 1;
        let record = result.map_err(|e| {
            let column = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err
                    .field()
                    .and_then(|f| headers.get(f as usize))
                    .unwrap_or_default()
                    .to_string(),
                _ => String::new(),
            };
            let message = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.kind().to_string(),
                other => format!("{other:?}"),
            };
            DataError::Malformed {
                file: file_name.clone(),
                row,
                column,
                message,
            }
        })?;
        out.push((row, record));
    }
    Ok(out)
}

fn read_ndjson<T: CrfRow>(path: &Path) -> Result<Vec<(usize, T)>, DataError> {
    let file_name = T::DOMAIN.ndjson_name();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut row = 0;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        let record: T = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            file: file_name.clone(),
            row,
            column: ndjson_column(&e.to_string()),
            message: e.to_string(),
        })?;
        out.push((row, record));
    }
    Ok(out)
}

/// Pulls the field name out of serde_json messages such as "missing field `grade`".
fn ndjson_column(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_default()
}

fn write_domain<T: CrfRow>(directory: &Path, records: &[T]) -> Result<(), DataError> {
    let path = directory.join(T::DOMAIN.csv_name());
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let to_io = |e: csv::Error| DataError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    writer.write_record(T::DOMAIN.columns()).map_err(to_io)?;
    for record in records {
        writer.serialize(record).map_err(to_io)?;
    }
    writer.flush().map_err(io_err(&path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn two_patient_fixture(dir: &Path) {
        write(dir, "demographics.csv", "patient_id,age,sex,enrollment_day\nP1,54,female,-7\nP2,61,male,-3\n");
        write(
            dir,
            "adverse_events.csv",
            "ae_id,patient_id,term,narrative,grade,start_day,end_day,causality,action_taken,serious\n\
             AE1,P1,nausea,Mild nausea after dosing.,1,3,5,related,none,false\n\
             AE2,P2,anemia,\"Moderate anemia, monitored.\",2,10,,possibly_related,none,false\n",
        );
        write(
            dir,
            "concomitant_medications.csv",
            "cm_id,patient_id,drug_name,indication_text,linked_ae_id,start_day,end_day,dose_text\n\
             CM1,P1,ondansetron,nausea,AE1,3,5,8 mg PO\n",
        );
        write(
            dir,
            "labs.csv",
            "lab_id,patient_id,analyte,value,units,collection_day,normal_low,normal_high\n\
             LB1,P2,hemoglobin,9.1,g/dL,10,12,16\n",
        );
        write(dir, "vitals.csv", "vs_id,patient_id,day,weight_kg,systolic_bp,diastolic_bp\nVS1,P1,1,70.5,120,80\n");
        write(dir, "exposure.csv", "ex_id,patient_id,dose_mg,start_day,end_day\nEX1,P1,100,1,21\nEX2,P2,100,1,21\n");
        write(dir, "medical_history.csv", "mh_id,patient_id,condition,pre_study\nMH1,P2,hypertension,true\n");
        write(dir, "procedures.csv", "pr_id,patient_id,name,day\nPR1,P1,ct scan,-2\n");
    }

    #[test]
    fn imports_well_formed_directory() {
        let dir = tempfile::tempdir().unwrap();
        two_patient_fixture(dir.path());
        let ds = import_dataset(dir.path()).unwrap();
        assert_eq!(ds.patients.len(), 2);
        assert_eq!(ds.provenance.len(), ds.record_count());
        assert_eq!(
            ds.provenance["AE2"],
            SourceRef {
                file: "adverse_events.csv".into(),
                row: 2
            }
        );
        assert_eq!(ds.adverse_events[1].end_day, None);
        assert_eq!(ds.adverse_events[1].narrative, "Moderate anemia, monitored.");
    }

    #[test]
    fn grade_out_of_range_names_file_row_column() {
        let dir = tempfile::tempdir().unwrap();
        two_patient_fixture(dir.path());
        write(
            dir.path(),
            "adverse_events.csv",
            "ae_id,patient_id,term,narrative,grade,start_day,end_day,causality,action_taken,serious\n\
             AE1,P1,nausea,Mild nausea.,7,3,5,related,none,false\n",
        );
        let err = import_dataset(dir.path()).unwrap_err();
        match &err {
            DataError::Malformed { file, row, column, message } => {
                assert_eq!(file, "adverse_events.csv");
                assert_eq!(*row, 1);
                assert_eq!(column, "grade");
                assert_eq!(message, "grade out of range 1–5");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unparseable_cell_names_column() {
        let dir = tempfile::tempdir().unwrap();
        two_patient_fixture(dir.path());
        write(
            dir.path(),
            "exposure.csv",
            "ex_id,patient_id,dose_mg,start_day,end_day\nEX1,P1,100,1,21\nEX2,P2,lots,1,21\n",
        );
        match import_dataset(dir.path()).unwrap_err() {
            DataError::Malformed { file, row, column, .. } => {
                assert_eq!((file.as_str(), row, column.as_str()), ("exposure.csv", 2, "dose_mg"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_linked_ae_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        two_patient_fixture(dir.path());
        write(
            dir.path(),
            "concomitant_medications.csv",
            "cm_id,patient_id,drug_name,indication_text,linked_ae_id,start_day,end_day,dose_text\n\
             CM1,P1,ondansetron,nausea,AE1,3,5,8 mg PO\n\
             CM7,P1,ondansetron,nausea,AE404,3,5,8 mg PO\n\
             CM8,P1,loperamide,diarrhea,,4,6,2 mg PO\n",
        );
        match import_dataset(dir.path()).unwrap_err() {
            DataError::Integrity { offenders } => {
                assert_eq!(offenders.len(), 1);
                assert!(offenders[0].contains("CM7"), "{offenders:?}");
                assert!(offenders[0].contains("AE404"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ndjson_is_accepted_as_alternate_input() {
        let dir = tempfile::tempdir().unwrap();
        two_patient_fixture(dir.path());
        fs::remove_file(dir.path().join("procedures.csv")).unwrap();
        write(
            dir.path(),
            "procedures.ndjson",
            "{\"pr_id\":\"PR1\",\"patient_id\":\"P1\",\"name\":\"ct scan\",\"day\":-2}\n\n{\"pr_id\":\"PR2\",\"patient_id\":\"P2\",\"name\":\"ecg\",\"day\":1}\n",
        );
        let ds = import_dataset(dir.path()).unwrap();
        assert_eq!(ds.procedures.len(), 2);
        assert_eq!(ds.provenance["PR2"].file, "procedures.ndjson");
        assert_eq!(ds.provenance["PR2"].row, 2);
    }

    #[test]
    fn missing_domain_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        two_patient_fixture(dir.path());
        fs::remove_file(dir.path().join("vitals.csv")).unwrap();
        assert!(matches!(
            import_dataset(dir.path()),
            Err(DataError::MissingFile { domain, .. }) if domain == "vitals"
        ));
    }

    #[test]
    fn round_trip_preserves_record_sets() {
        let src = tempfile::tempdir().unwrap();
        two_patient_fixture(src.path());
        let ds = import_dataset(src.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        export_dataset(&ds, out.path()).unwrap();
        let again = import_dataset(out.path()).unwrap();
        assert!(ds.same_records(&again));
    }

    #[test]
    fn empty_dataset_exports_header_only_files() {
        let out = tempfile::tempdir().unwrap();
        export_dataset(&StudyDataset::default(), out.path()).unwrap();
        for domain in DOMAINS {
            let body = fs::read_to_string(out.path().join(domain.csv_name())).unwrap();
            assert_eq!(body, format!("{}\n", domain.columns().join(",")));
        }
        let again = import_dataset(out.path()).unwrap();
        assert_eq!(again.record_count(), 0);
    }

    #[test]
    fn overlapping_exposure_rejected() {
        let dir = tempfile::tempdir().unwrap();
        two_patient_fixture(dir.path());
        write(
            dir.path(),
            "exposure.csv",
            "ex_id,patient_id,dose_mg,start_day,end_day\nEX1,P1,100,1,21\nEX3,P1,75,20,40\nEX2,P2,100,1,21\n",
        );
        assert!(matches!(import_dataset(dir.path()), Err(DataError::Integrity { .. })));
    }
}
